import pytest

from cvmrate import (
    LatticeSpec,
    build_factor_graph,
    build_interference_matrix,
    realize_channel,
    snr_to_sigma2,
)

_ACCEPTANCE = pytest.StashKey[list]()


def make_instance(topology: str, n: int, alpha: float, snr_db: float, seed: int, prior=None):
    """Realization, interference matrix, factor graph and ledger for one trial."""
    spec = LatticeSpec(topology, n, alpha)
    s = build_interference_matrix(spec)
    real = realize_channel(spec, snr_to_sigma2(snr_db), seed, prior, s)
    fg, ledger = build_factor_graph(s, real.observations, real.sigma2, prior)
    return real, s, fg, ledger


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
