"""Monte-Carlo estimation of symmetric information rates.

Each trial draws inputs and noise, builds the posterior factor graph and
estimates the per-symbol free energy ``F~ = -ln Z~ / N^2`` (prior absorbed in
``Z~``).  Because the output density is ``p(y) = C * Z~`` with
``-ln C / N^2 = ln(2 pi sigma2) / 2`` and ``h(Y|X) = ln(2 pi e sigma2) / 2``
per symbol, the information rate of one trial is ``F~ - 1/2`` nats.

Trial ``t`` of a run with master seed ``m`` uses seed ``derive_seed(m, t)``.
The noise is ``sqrt(sigma2)`` times a seed-determined standard normal vector.
Runs that share a master seed therefore share inputs and noise shapes across
SNR and alpha grid points (common random numbers).
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exact_oracle import MAX_STRIP_SIZE, OracleGuardError, brute_force_log_partition, strip_dp_log_partition
from .factor_model import build_factor_graph
from .gbp_engine import GBPConfig, run_gbp
from .lattice_channel import (
    ChannelRealization,
    InputPrior,
    InterferenceMatrix,
    LatticeSpec,
    Topology,
    build_interference_matrix,
    realize_channel,
)
from .region_graph import RegionGraph, build_region_graph
from .rng import derive_seed

LN2 = math.log(2.0)


class Engine(enum.Enum):
    GBP = "gbp"
    BRUTE = "brute"
    STRIP = "strip"

    @classmethod
    def parse(cls, text: str | Engine) -> Engine:
        if isinstance(text, Engine):
            return text
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise ValueError(f"unknown engine {text!r} (expected gbp, brute or strip)") from None


@dataclass(frozen=True)
class TrialResult:
    seed: int
    free_energy_per_symbol: float
    sir_nats: float
    sir_bits: float
    converged: bool
    iterations: int


CSV_FIELDS = (
    "topology",
    "size_n",
    "alpha",
    "snr_db",
    "prior",
    "engine",
    "window",
    "damping",
    "tolerance",
    "max_iters",
    "trials",
    "master_seed",
    "mean_sir_bits",
    "std_sir_bits",
    "stderr_sir_bits",
    "mean_free_energy_per_symbol_nats",
    "converged_fraction",
    "mean_iterations",
)


@dataclass(frozen=True)
class RateEstimate:
    topology: str
    size_n: int
    alpha: float
    snr_db: float
    prior: str
    engine: str
    window: int
    damping: float
    tolerance: float
    max_iters: int
    trials: int
    master_seed: int
    mean_sir_bits: float
    std_sir_bits: float
    stderr_sir_bits: float
    mean_free_energy_per_symbol_nats: float
    converged_fraction: float
    mean_iterations: float
    results: tuple[TrialResult, ...] = field(default=(), repr=False, compare=False)

    @property
    def negative_sir(self) -> bool:
        """Raw mean below zero: Monte-Carlo noise at very low SNR, never clamped."""
        return self.mean_sir_bits < 0.0

    def record(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def sir_from_free_energy(f_tilde_per_symbol: float) -> tuple[float, float]:
    """``(nats, bits)`` of ``F~ - 1/2``; no clamping."""
    nats = float(f_tilde_per_symbol) - 0.5
    return nats, nats / LN2


def snr_db_from_sigma2(sigma2: float) -> float:
    return -10.0 * math.log10(sigma2)


_GRAPH_CACHE: dict = {}


def _region_graph(size_n: int, fg, window: int) -> RegionGraph:
    # the graph depends on the realization only through the factor scopes
    key = (size_n, window, fg.scopes, fg.domain_sizes)
    g = _GRAPH_CACHE.get(key)
    if g is None:
        if len(_GRAPH_CACHE) >= 4:
            _GRAPH_CACHE.pop(next(iter(_GRAPH_CACHE)))
        g = _GRAPH_CACHE[key] = build_region_graph(size_n, fg, window)
    return g


def free_energy_per_symbol(
    realization: ChannelRealization,
    engine: Engine | str = Engine.GBP,
    config: GBPConfig | None = None,
    prior: InputPrior | None = None,
    window: int = 3,
    s: InterferenceMatrix | None = None,
) -> tuple[float, bool, int]:
    """``(F~ in nats per symbol, converged, iterations)`` for one realization.

    Exact engines always report ``converged=True`` and zero iterations.
    """
    engine = Engine.parse(engine)
    spec = realization.spec
    s = s or build_interference_matrix(spec)
    fg, ledger = build_factor_graph(s, realization.observations, realization.sigma2, prior)
    if engine is Engine.GBP:
        g = _region_graph(spec.size_n, fg, window)
        _, est, _ = run_gbp(g, fg, ledger, config or GBPConfig())
        return est.per_symbol, est.converged, est.iterations
    if engine is Engine.BRUTE:
        log_z = brute_force_log_partition(fg, ledger)
    else:
        log_z = strip_dp_log_partition(fg, spec, ledger)
    return -log_z / spec.n_vars, True, 0


def trial_seed(master_seed: int, t: int) -> int:
    return derive_seed(master_seed, t)


def run_trial(
    spec: LatticeSpec,
    sigma2: float,
    seed: int,
    prior: InputPrior | None = None,
    engine: Engine | str = Engine.GBP,
    config: GBPConfig | None = None,
    window: int = 3,
) -> TrialResult:
    s = build_interference_matrix(spec)
    real = realize_channel(spec, sigma2, seed, prior, s)
    f, converged, iterations = free_energy_per_symbol(real, engine, config, prior, window, s)
    nats, bits = sir_from_free_energy(f)
    return TrialResult(seed, f, nats, bits, converged, iterations)


def _run_chunk(args) -> list[TrialResult]:
    spec, sigma2, seeds, prior, engine, config, window = args
    return [run_trial(spec, sigma2, sd, prior, engine, config, window) for sd in seeds]


def _check_guards(spec: LatticeSpec, engine: Engine, prior: InputPrior) -> None:
    if engine is Engine.STRIP and spec.size_n > MAX_STRIP_SIZE:
        raise OracleGuardError(f"strip DP supports N <= {MAX_STRIP_SIZE}, got N={spec.size_n}")
    if engine is Engine.BRUTE:
        states = sum(p > 0 for p in prior.probabilities) ** spec.n_vars
        if states > 2**24:
            raise OracleGuardError(f"brute force over {states} joint states exceeds the guard of {2**24}")


def monte_carlo_sir(
    spec: LatticeSpec,
    sigma2: float,
    prior: InputPrior | None = None,
    trials: int = 100,
    master_seed: int = 0,
    engine: Engine | str = Engine.GBP,
    config: GBPConfig | None = None,
    window: int = 3,
    workers: int = 1,
    exclude_unconverged: bool = False,
) -> RateEstimate:
    """Average per-trial SIR over ``trials`` seeded realizations.

    Results are reduced in trial order, so they do not depend on ``workers``.
    Non-converged GBP trials are kept unless ``exclude_unconverged``; the
    converged fraction is reported either way.  ``std_sir_bits`` is the
    sample standard deviation (zero for a single trial).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    prior = prior or InputPrior.uniform_binary()
    engine = Engine.parse(engine)
    config = config or GBPConfig()
    _check_guards(spec, engine, prior)
    seeds = [trial_seed(master_seed, t) for t in range(trials)]
    if workers > 1 and trials > 1:
        chunks = [seeds[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(spec, sigma2, c, prior, engine, config, window) for c in chunks]))
        by_seed = {r.seed: r for part in parts for r in part}
        results = [by_seed[sd] for sd in seeds]
    else:
        results = _run_chunk((spec, sigma2, seeds, prior, engine, config, window))
    return aggregate(results, spec, sigma2, prior, engine, config, window, master_seed, exclude_unconverged)


def aggregate(
    results,
    spec: LatticeSpec,
    sigma2: float,
    prior: InputPrior,
    engine: Engine,
    config: GBPConfig,
    window: int,
    master_seed: int,
    exclude_unconverged: bool = False,
) -> RateEstimate:
    results = tuple(results)
    used = [r for r in results if r.converged] if exclude_unconverged else list(results)
    if not used:
        raise ValueError("no trials left to aggregate")
    bits = np.array([r.sir_bits for r in used])
    m = bits.size
    mean = math.fsum(bits) / m
    std = math.sqrt(math.fsum((bits - mean) ** 2) / (m - 1)) if m > 1 else 0.0
    est = RateEstimate(
        topology=Topology.parse(spec.topology).value,
        size_n=spec.size_n,
        alpha=float(spec.alpha),
        snr_db=snr_db_from_sigma2(sigma2),
        prior=prior.label,
        engine=engine.value,
        window=window,
        damping=config.damping,
        tolerance=config.tolerance,
        max_iters=config.max_iters,
        trials=m,
        master_seed=master_seed,
        mean_sir_bits=mean,
        std_sir_bits=std,
        stderr_sir_bits=std / math.sqrt(m),
        mean_free_energy_per_symbol_nats=math.fsum(r.free_energy_per_symbol for r in used) / m,
        converged_fraction=sum(r.converged for r in results) / len(results),
        mean_iterations=math.fsum(r.iterations for r in used) / m,
        results=results,
    )
    if est.negative_sir:
        warnings.warn(f"mean SIR is negative ({mean:.3g} bits); reported raw", RuntimeWarning, stacklevel=2)
    return est


@dataclass(frozen=True)
class RmsRow:
    size_n: int
    rms_percent: float
    trials: int
    max_abs_rel: float
    converged_fraction: float


def rms_error_vs_exact(
    topology: Topology | str,
    sizes,
    sigma2: float,
    alpha: float,
    trials: int,
    master_seed: int = 0,
    config: GBPConfig | None = None,
    window: int = 3,
    prior: InputPrior | None = None,
) -> list[RmsRow]:
    """Relative error of GBP against strip DP, ``100 * sqrt(mean(((F^ - F) / F)^2))`` per size."""
    sizes = list(sizes)
    too_big = [n for n in sizes if n > MAX_STRIP_SIZE]
    if too_big:
        raise OracleGuardError(f"strip DP supports N <= {MAX_STRIP_SIZE}, got N={max(too_big)}")
    config = config or GBPConfig()
    rows = []
    for n in sizes:
        spec = LatticeSpec(topology, n, alpha)
        s = build_interference_matrix(spec)
        rel, conv = [], []
        for t in range(trials):
            real = realize_channel(spec, sigma2, trial_seed(master_seed, t), prior, s)
            f_hat, ok, _ = free_energy_per_symbol(real, Engine.GBP, config, prior, window, s)
            f_exact, _, _ = free_energy_per_symbol(real, Engine.STRIP, config, prior, window, s)
            rel.append((f_hat - f_exact) / f_exact)
            conv.append(ok)
        rel = np.array(rel)
        rows.append(
            RmsRow(
                size_n=n,
                rms_percent=100.0 * math.sqrt(math.fsum(rel**2) / trials),
                trials=trials,
                max_abs_rel=float(np.max(np.abs(rel))),
                converged_fraction=sum(conv) / trials,
            )
        )
    return rows
