import io
import math

import numpy as np
import pytest
from conftest import make_instance
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import factorized_log_z, log_z_tilde

from cvmrate.exact_oracle import brute_force_log_partition
from cvmrate.factor_model import (
    Factor,
    FactorGraph,
    LogConstantLedger,
    build_factor_graph,
    build_pairwise_view,
    dump_factor_graph,
    load_factor_graph,
    reconcile_log_partition,
)
from cvmrate.lattice_channel import (
    InputPrior,
    InterferenceMatrix,
    InvalidSpecError,
    LatticeSpec,
    build_interference_matrix,
)


def test_single_variable_closed_form():
    s = InterferenceMatrix.from_dense([[1.0]])
    fg, ledger = build_factor_graph(s, [0.7], 1.0)
    expected = math.log(0.5 * math.exp(-((0.7 - 1) ** 2) / 2) + 0.5 * math.exp(-((0.7 + 1) ** 2) / 2))
    assert brute_force_log_partition(fg, ledger) == pytest.approx(expected, rel=1e-14)


def test_zero_alpha_factorizes():
    real, s, fg, ledger = make_instance("hex", 4, 0.0, 0.0, 5)
    assert all(len(f.scope) == 1 for f in fg.factors)
    assert brute_force_log_partition(fg, ledger) == pytest.approx(
        factorized_log_z(real.observations, real.sigma2), rel=1e-12
    )


def test_isi4_matches_direct_enumeration():
    real, s, fg, ledger = make_instance("isi", 4, 0.5, 0.0, 2024)
    expected = log_z_tilde(s.dense(), real.observations, real.sigma2)
    assert brute_force_log_partition(fg, ledger) == pytest.approx(expected, rel=1e-10)


def test_observation_factor_scopes_are_row_supports():
    real, s, fg, ledger = make_instance("hex", 4, 0.5, 3.0, 1)
    obs = [f for f in fg.factors if f.name.startswith("obs")]
    assert [f.scope for f in obs] == [tuple(sorted(s.row(k))) for k in range(16)]
    assert all(np.max(f.table) == 0.0 for f in fg.factors)


def test_binomial_prior_matches_enumeration():
    prior = InputPrior.binomial(2)
    real, s, fg, ledger = make_instance("isi", 3, 0.5, 2.0, 7, prior)
    expected = log_z_tilde(s.dense(), real.observations, real.sigma2, prior.alphabet, prior.probabilities)
    assert brute_force_log_partition(fg, ledger) == pytest.approx(expected, rel=1e-10)


def test_zero_probability_value_is_structural():
    prior = InputPrior((1.0, 0.0, -1.0), (0.5, 0.0, 0.5))
    real, s, fg, ledger = make_instance("isi", 3, 0.5, 0.0, 3, prior)
    assert fg.domains[0] == (1.0, -1.0)
    assert any(label.startswith("structural") for label, _ in ledger.entries)
    expected = log_z_tilde(s.dense(), real.observations, real.sigma2)
    assert brute_force_log_partition(fg, ledger) == pytest.approx(expected, rel=1e-10)


def test_nonpositive_sigma2_rejected():
    s = build_interference_matrix(LatticeSpec("isi", 3, 0.5))
    with pytest.raises(InvalidSpecError):
        build_factor_graph(s, np.zeros(9), 0.0)


def test_pairwise_identity_channel():
    s = InterferenceMatrix.from_dense(np.eye(9))
    y = np.linspace(-1, 1, 9)
    view = build_pairwise_view(s, y, 0.5)
    assert np.allclose(view.r_matrix.toarray(), np.eye(9))
    assert np.allclose(view.matched_output, y)
    assert view.pair_potentials == {}
    for i in range(9):
        assert np.allclose(view.unary_potentials[i], y[i] * np.array([1.0, -1.0]) / 0.5)


def test_pairwise_potentials_follow_r():
    real, s, fg, ledger = make_instance("hex", 4, 0.5, 0.0, 8)
    view = build_pairwise_view(s, real.observations, real.sigma2)
    r = s.dense().T @ s.dense()
    assert np.allclose(view.r_matrix.toarray(), r)
    assert np.allclose(np.diag(r), (s.dense() ** 2).sum(axis=0))
    x = np.array([1.0, -1.0])
    for (i, j), table in view.pair_potentials.items():
        assert np.allclose(table, -r[i, j] * np.outer(x, x) / real.sigma2)
    expected_const = -(real.observations @ real.observations + np.trace(r)) / (2 * real.sigma2)
    assert view.constant_nats == pytest.approx(expected_const, rel=1e-13)


def test_pairwise_view_equivalence_isi4():
    real, s, fg, ledger = make_instance("isi", 4, 0.5, 0.0, 31)
    pfg, pledger = build_pairwise_view(s, real.observations, real.sigma2).to_factor_graph()
    assert brute_force_log_partition(pfg, pledger) == pytest.approx(
        brute_force_log_partition(fg, ledger), rel=1e-10
    )


def test_pairwise_view_binomial_prior():
    prior = InputPrior.binomial(2)
    real, s, fg, ledger = make_instance("hex", 3, 0.5, 4.0, 17, prior)
    view = build_pairwise_view(s, real.observations, real.sigma2, prior.alphabet)
    pfg, pledger = view.to_factor_graph(prior)
    assert brute_force_log_partition(pfg, pledger) == pytest.approx(
        brute_force_log_partition(fg, ledger), rel=1e-10
    )


def test_hex6_r_support_fits_windows():
    spec = LatticeSpec("hex", 4, 0.5)
    s = build_interference_matrix(spec)
    view = build_pairwise_view(s, np.zeros(16), 1.0)
    offsets = set()
    for i, j in view.pair_potentials:
        (ri, ci), (rj, cj) = spec.site(i), spec.site(j)
        offsets.add((rj - ri, cj - ci))
        assert abs(rj - ri) <= 2 and abs(cj - ci) <= 2
    assert (2, -2) in offsets


def test_reconcile_examples():
    ledger = LogConstantLedger()
    ledger.add("c", -3.2)
    assert reconcile_log_partition(0.0, ledger) == pytest.approx(-3.2)
    ledger = LogConstantLedger()
    ledger.add("a", 1.5)
    ledger.add("b", -0.5)
    assert ledger.total == 1.0
    assert reconcile_log_partition(2.0, ledger) == 3.0
    with pytest.raises(ValueError):
        reconcile_log_partition(math.inf, ledger)
    with pytest.raises(ValueError):
        ledger.add("bad", math.nan)


def test_reconcile_on_small_lattice():
    # 2x2 channel with a full 2x2 interference pattern
    s = InterferenceMatrix.from_dense(
        [[1, 0.5, 0.5, 0], [0.5, 1, 0, 0.5], [0.5, 0, 1, 0.5], [0, 0.5, 0.5, 1]]
    )
    y = np.array([0.3, -1.2, 2.0, 0.1])
    fg, ledger = build_factor_graph(s, y, 0.7)
    raw = brute_force_log_partition(fg)
    assert reconcile_log_partition(raw, ledger) == pytest.approx(log_z_tilde(s.dense(), y, 0.7), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-50, 50), which=st.integers(0, 24), seed=st.integers(0, 2**32))
def test_normalization_round_trip(shift, which, seed):
    real, s, fg, ledger = make_instance("isi", 3, 0.5, 0.0, seed)
    before = reconcile_log_partition(brute_force_log_partition(fg), ledger)
    factors = list(fg.factors)
    f = factors[which % len(factors)]
    factors[which % len(factors)] = Factor(f.name, f.scope, f.table - shift)
    ledger.add("extra shift", shift)
    moved = FactorGraph(fg.domains, tuple(factors))
    after = reconcile_log_partition(brute_force_log_partition(moved), ledger)
    assert after == pytest.approx(before, rel=1e-12, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(
    topology=st.sampled_from(["isi", "hex"]),
    n=st.integers(3, 7),
    alpha=st.sampled_from([0.0, 0.3, -0.5, 1.0]),
    seed=st.integers(0, 2**32),
)
def test_scopes_fit_windows(topology, n, alpha, seed):
    real, s, fg, ledger = make_instance(topology, n, alpha, 0.0, seed)
    spec = real.spec
    for f in fg.factors:
        rows = [spec.site(v)[0] for v in f.scope]
        cols = [spec.site(v)[1] for v in f.scope]
        assert max(rows) - min(rows) <= 2 and max(cols) - min(cols) <= 2
        assert np.all(np.isfinite(f.table))
        assert f.table.size == 2 ** len(f.scope)
    assert math.isclose(ledger.total, math.fsum(v for _, v in ledger.entries), abs_tol=1e-12)


def test_dump_round_trip():
    real, s, fg, ledger = make_instance("hex", 3, 0.5, 0.0, 4)
    buf = io.StringIO()
    dump_factor_graph(fg, buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == len(fg.factors)
    assert lines[0].startswith("factor 0 scope=")
    back = load_factor_graph(lines, fg.domains)
    for a, b in zip(fg.factors, back.factors):
        assert a.scope == b.scope
        assert np.array_equal(a.table, b.table)
