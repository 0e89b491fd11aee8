"""Discrete factor graphs for the lattice channel posterior.

The quantity of interest is

    Z~ = sum_x Pr(x) exp(-||y - S x||^2 / (2 sigma2)),

the partition function with the input prior absorbed.  ``build_factor_graph``
writes it as one observation factor per output (scope = support of that row
of ``S``) times one prior factor per input.  Every table is shifted so its
maximum is zero; the shifts go into a :class:`LogConstantLedger` so that

    ln Z~ = ledger.total + ln sum_x prod_a exp(table_a(x_a)).

``build_pairwise_view`` gives the equivalent pairwise Markov random field in
terms of ``R = S^T S`` and the matched-filter output ``h = S^T y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

from .lattice_channel import InputPrior, InterferenceMatrix, InvalidSpecError


@dataclass(frozen=True)
class Factor:
    name: str
    scope: tuple[int, ...]
    table: np.ndarray = field(repr=False)  # log values, one axis per scope variable


@dataclass(frozen=True)
class FactorGraph:
    domains: tuple[tuple[float, ...], ...]  # allowed values of each variable
    factors: tuple[Factor, ...]

    def __post_init__(self):
        seen = set()
        for f in self.factors:
            shape = tuple(len(self.domains[v]) for v in f.scope)
            if f.table.shape != shape:
                raise ValueError(f"factor {f.name}: table shape {f.table.shape} != {shape}")
            if not np.all(np.isfinite(f.table)):
                raise ValueError(f"factor {f.name}: non-finite log-table entry")
            seen.update(f.scope)
        missing = set(range(self.n_vars)) - seen
        if missing:
            raise ValueError(f"variables {sorted(missing)} appear in no factor")

    @property
    def n_vars(self) -> int:
        return len(self.domains)

    @property
    def scopes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(f.scope for f in self.factors)

    @property
    def domain_sizes(self) -> tuple[int, ...]:
        return tuple(len(d) for d in self.domains)


@dataclass
class LogConstantLedger:
    """Additive log-constants (nats) dropped from the factor tables."""

    entries: list[tuple[str, float]] = field(default_factory=list)

    def add(self, label: str, value: float) -> None:
        if not math.isfinite(value):
            raise ValueError(f"ledger entry {label!r} is not finite: {value}")
        self.entries.append((label, float(value)))

    @property
    def total(self) -> float:
        return math.fsum(v for _, v in self.entries)


def reconcile_log_partition(raw_log_sum: float, ledger: LogConstantLedger) -> float:
    """``ln Z~`` from the log-sum of the normalized tables plus the ledger."""
    total = ledger.total
    if not (math.isfinite(raw_log_sum) and math.isfinite(total)):
        raise ValueError(f"non-finite log partition terms: raw={raw_log_sum}, ledger={total}")
    return raw_log_sum + total


def _grid(domains: Iterable[tuple[float, ...]]) -> list[np.ndarray]:
    return np.meshgrid(*[np.asarray(d) for d in domains], indexing="ij")


def _prior_domain(prior: InputPrior, ledger: LogConstantLedger) -> tuple[tuple[float, ...], np.ndarray]:
    keep = [i for i, p in enumerate(prior.probabilities) if p > 0]
    dropped = [prior.alphabet[i] for i in range(len(prior.alphabet)) if i not in keep]
    if dropped:
        # structural: zero-probability values leave the domain, contributing exp(-inf) = 0
        ledger.entries.append((f"structural: removed zero-probability values {dropped}", 0.0))
    values = tuple(prior.alphabet[i] for i in keep)
    logp = np.log([prior.probabilities[i] for i in keep])
    return values, logp


def build_factor_graph(
    s: InterferenceMatrix, y, sigma2: float, prior: InputPrior | None = None
) -> tuple[FactorGraph, LogConstantLedger]:
    prior = prior or InputPrior.uniform_binary()
    y = np.asarray(y, dtype=float)
    if y.shape != (s.n_vars,):
        raise InvalidSpecError(f"observation shape {y.shape} != ({s.n_vars},)")
    if not sigma2 > 0:
        raise InvalidSpecError("sigma2 must be positive")
    ledger = LogConstantLedger()
    values, logp = _prior_domain(prior, ledger)
    domains = (values,) * s.n_vars
    factors = []
    for k in range(s.n_vars):
        row = s.row(k)
        scope = tuple(sorted(row))
        mean = sum(row[j] * g for j, g in zip(scope, _grid([values] * len(scope))))
        table = -((y[k] - mean) ** 2) / (2.0 * sigma2)
        shift = float(table.max())
        ledger.add(f"obs[{k}] max", shift)
        factors.append(Factor(f"obs[{k}]", scope, table - shift))
    shift = float(logp.max())
    for i in range(s.n_vars):
        ledger.add(f"prior[{i}] max", shift)
        factors.append(Factor(f"prior[{i}]", (i,), logp - shift))
    return FactorGraph(domains, tuple(factors)), ledger


@dataclass(frozen=True)
class PairwiseView:
    """Pairwise MRF form of the posterior.

    ``pair_potentials`` maps ``(i, j)`` with ``i < j`` and ``R_ij != 0`` to the
    log-table ``-R_ij x_i x_j / sigma2``; ``unary_potentials[i]`` is
    ``h_i x_i / sigma2``, plus ``-R_ii x_i^2 / (2 sigma2)`` when the alphabet is
    not +-1.  For +-1 inputs that self-term is the constant ``-R_ii / (2 sigma2)``
    and lives in ``constant_nats`` instead.
    """

    r_matrix: sp.csr_matrix = field(repr=False)
    matched_output: np.ndarray = field(repr=False)
    sigma2: float
    alphabet: tuple[float, ...]
    pair_potentials: dict[tuple[int, int], np.ndarray] = field(repr=False)
    unary_potentials: tuple[np.ndarray, ...] = field(repr=False)
    constant_nats: float

    def to_factor_graph(self, prior: InputPrior | None = None) -> tuple[FactorGraph, LogConstantLedger]:
        """Pairwise potentials and prior as a factor graph with an unnormalized ledger."""
        prior = prior or InputPrior(self.alphabet, (1.0 / len(self.alphabet),) * len(self.alphabet))
        if tuple(prior.alphabet) != self.alphabet:
            raise InvalidSpecError("prior alphabet differs from the view's alphabet")
        if any(p == 0 for p in prior.probabilities):
            raise InvalidSpecError("pairwise view requires a strictly positive prior")
        ledger = LogConstantLedger()
        ledger.add("pairwise constant", self.constant_nats)
        logp = np.log(prior.probabilities)
        factors = [Factor(f"phi[{i}]", (i,), u + logp) for i, u in enumerate(self.unary_potentials)]
        factors += [Factor(f"psi[{i},{j}]", (i, j), t) for (i, j), t in sorted(self.pair_potentials.items())]
        return FactorGraph((self.alphabet,) * len(self.unary_potentials), tuple(factors)), ledger


def build_pairwise_view(s: InterferenceMatrix, y, sigma2: float, alphabet=(1.0, -1.0)) -> PairwiseView:
    y = np.asarray(y, dtype=float)
    if y.shape != (s.n_vars,):
        raise InvalidSpecError(f"observation shape {y.shape} != ({s.n_vars},)")
    if not sigma2 > 0:
        raise InvalidSpecError("sigma2 must be positive")
    alphabet = tuple(float(a) for a in alphabet)
    binary = sorted(alphabet) == [-1.0, 1.0]
    r = (s.matrix.T @ s.matrix).tocsr()
    r.sort_indices()
    h = s.matrix.T @ y
    x = np.asarray(alphabet)
    r_diag = r.diagonal()
    pairs = {}
    coo = sp.triu(r, k=1).tocoo()
    for i, j, v in zip(coo.row, coo.col, coo.data):
        if v != 0.0:
            pairs[(int(i), int(j))] = -v * np.outer(x, x) / sigma2
    if binary:
        unary = tuple(h[i] * x / sigma2 for i in range(s.n_vars))
        constant = -(float(y @ y) + float(r_diag.sum())) / (2.0 * sigma2)
    else:
        unary = tuple(h[i] * x / sigma2 - r_diag[i] * x**2 / (2.0 * sigma2) for i in range(s.n_vars))
        constant = -float(y @ y) / (2.0 * sigma2)
    return PairwiseView(r, h, float(sigma2), alphabet, pairs, unary, constant)


def dump_factor_graph(fg: FactorGraph, out: TextIO) -> None:
    """One line per factor: ``factor <id> scope=<ids> logtable=<values>``.

    Tables are flattened in C order (last scope variable fastest); values use
    ``repr`` so the dump round-trips.
    """
    for a, f in enumerate(fg.factors):
        scope = ",".join(str(v) for v in f.scope)
        values = ",".join(repr(float(t)) for t in f.table.reshape(-1))
        out.write(f"factor {a} scope={scope} logtable={values}\n")


def load_factor_graph(lines: Iterable[str], domains) -> FactorGraph:
    """Inverse of :func:`dump_factor_graph`; names become ``f<id>``."""
    factors = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        tag, fid, scope_part, table_part = line.split(" ")
        if tag != "factor":
            raise ValueError(f"unexpected line {line!r}")
        scope = tuple(int(v) for v in scope_part.removeprefix("scope=").split(","))
        vals = np.array([float(v) for v in table_part.removeprefix("logtable=").split(",")])
        shape = tuple(len(domains[v]) for v in scope)
        factors.append(Factor(f"f{fid}", scope, vals.reshape(shape)))
    return FactorGraph(tuple(tuple(d) for d in domains), tuple(factors))

