"""Exact reference values for small lattices.

``brute_force_log_partition`` enumerates every joint assignment.
``strip_dp_log_partition`` eliminates variables in raster order and keeps
only the frontier of variables that still appear in unabsorbed factors.
With scopes spanning at most three lattice rows, that frontier holds at most
``2N + 1`` variables.  Both work in the log domain throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from .factor_model import FactorGraph, LogConstantLedger, reconcile_log_partition
from .lattice_channel import LatticeSpec

MAX_BRUTE_STATES = 2**24
MAX_STRIP_SIZE = 12


class OracleGuardError(ValueError):
    """The instance is too large or structured wrongly for an exact method."""


def _joint_log_weights(fg: FactorGraph, lo: int, hi: int) -> np.ndarray:
    sizes = fg.domain_sizes
    digits = np.unravel_index(np.arange(lo, hi, dtype=np.int64), sizes)
    total = np.zeros(hi - lo)
    for f in fg.factors:
        idx = np.ravel_multi_index(tuple(digits[v] for v in f.scope), f.table.shape)
        total += f.table.reshape(-1)[idx]
    return total


def _n_states(fg: FactorGraph, limit: int) -> int:
    n = math.prod(fg.domain_sizes)
    if n > limit:
        raise OracleGuardError(f"brute force over {n} joint states exceeds the guard of {limit}")
    return n


def brute_force_log_partition(
    fg: FactorGraph, ledger: LogConstantLedger | None = None, max_states: int = MAX_BRUTE_STATES
) -> float:
    """Exact ``ln Z~`` by exhaustive log-sum-exp, plus ledger constants."""
    n = _n_states(fg, max_states)
    block = 1 << 16
    partial = [logsumexp(_joint_log_weights(fg, lo, min(n, lo + block))) for lo in range(0, n, block)]
    raw = float(logsumexp(partial))
    return reconcile_log_partition(raw, ledger) if ledger is not None else raw


def brute_force_marginals(fg: FactorGraph, max_states: int = 2**20) -> list[np.ndarray]:
    """Exact single-variable posterior marginals."""
    n = _n_states(fg, max_states)
    logw = _joint_log_weights(fg, 0, n)
    p = np.exp(logw - logsumexp(logw))
    digits = np.unravel_index(np.arange(n), fg.domain_sizes)
    return [np.bincount(digits[v], weights=p, minlength=k) for v, k in enumerate(fg.domain_sizes)]


@dataclass
class StripState:
    frontier: list[int]  # active variables, one table axis each
    table: np.ndarray  # log weights over frontier assignments


def _broadcast(factor_table: np.ndarray, scope, frontier: list[int]) -> np.ndarray:
    axes = np.array([frontier.index(v) for v in scope])
    perm = np.argsort(axes)
    t = factor_table.transpose(perm)
    shape = [1] * len(frontier)
    for ax, size in zip(axes[perm], t.shape):
        shape[ax] = size
    return t.reshape(shape)


def strip_dp_log_partition(
    fg: FactorGraph,
    spec: LatticeSpec,
    ledger: LogConstantLedger | None = None,
    order: str = "raster",
) -> float:
    """Exact ``ln Z~`` by frontier variable elimination.

    ``order`` is ``"raster"`` (row-major) or ``"transposed"`` (column-major).
    Each factor is absorbed when its last scope variable enters; a variable is
    summed out once every factor containing it has been absorbed.
    """
    n = spec.size_n
    if n > MAX_STRIP_SIZE:
        raise OracleGuardError(f"strip DP supports N <= {MAX_STRIP_SIZE} (2^(2N+1) states), got N={n}")
    if fg.n_vars != n * n:
        raise OracleGuardError(f"factor graph has {fg.n_vars} variables, lattice has {n * n}")
    if order == "raster":
        seq = list(range(n * n))
        line = lambda v: v // n  # noqa: E731
    elif order == "transposed":
        seq = [r * n + c for c in range(n) for r in range(n)]
        line = lambda v: v % n  # noqa: E731
    else:
        raise ValueError(f"unknown elimination order {order!r}")
    pos = {v: t for t, v in enumerate(seq)}

    absorb_at: dict[int, list[int]] = {}
    last_use = {v: pos[v] for v in range(n * n)}
    for a, f in enumerate(fg.factors):
        lines = [line(v) for v in f.scope]
        if max(lines) - min(lines) > 2:
            raise OracleGuardError(f"unsupported-structure: factor {f.name} spans more than 3 lattice rows")
        t = max(pos[v] for v in f.scope)
        absorb_at.setdefault(t, []).append(a)
        for v in f.scope:
            last_use[v] = max(last_use[v], t)

    max_frontier = 2 * n + 1
    state = StripState([], np.zeros(()))
    for t, v in enumerate(seq):
        k = fg.domain_sizes[v]
        state.table = state.table[..., np.newaxis] + np.zeros(k)
        state.frontier.append(v)
        if len(state.frontier) > max_frontier:
            raise OracleGuardError(f"frontier grew to {len(state.frontier)} > {max_frontier} variables")
        for a in absorb_at.get(t, ()):
            f = fg.factors[a]
            state.table = state.table + _broadcast(f.table, f.scope, state.frontier)
        for u in [u for u in state.frontier if last_use[u] <= t]:
            state.table = logsumexp(state.table, axis=state.frontier.index(u))
            state.frontier.remove(u)
    raw = float(logsumexp(state.table))
    return reconcile_log_partition(raw, ledger) if ledger is not None else raw


def bpsk_awgn_mutual_information(snr_linear: float, nodes: int = 256) -> float:
    """Mutual information (bits) of equiprobable +-1 over real AWGN, ``sigma2 = 1/snr``.

    ``I = 1 - E_v[log2(1 + exp(-2 (1 + sigma v) / sigma2))]`` with
    ``v ~ N(0, 1)``, evaluated by Gauss-Hermite quadrature.
    """
    if not snr_linear > 0:
        raise ValueError("snr_linear must be positive")
    sigma2 = 1.0 / snr_linear
    sigma = math.sqrt(sigma2)
    t, w = hermgauss(nodes)
    v = math.sqrt(2.0) * t
    penalty = np.logaddexp(0.0, -2.0 * (1.0 + sigma * v) / sigma2) / math.log(2.0)
    return float(1.0 - np.dot(w, penalty) / math.sqrt(math.pi))
