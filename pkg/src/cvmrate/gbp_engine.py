"""Generalized belief propagation for the cluster-variation free energy.

The Kikuchi functional of a region graph is

    F_K[b] = sum_R c_R sum_{x_R} b_R (E_R + ln b_R),

minimized over beliefs that agree on shared variables.  Two message-passing
schemes with the same stationary points are provided.

``"outer-inner"`` (the default) works on the maximal (outer) regions, which
must have counting number 1, and on the remaining regions with nonzero
counting number (inner regions).  With ``phi_R`` the product of the factors
inside ``R``, every inner region ``B`` and outer region ``A`` containing it
exchange a message ``mu_{B->A}(x_B)`` and

    Q_A  ~  phi_A * prod_{B in A} mu_{B->A},
    Q_B^(n_B + c_B)  ~  phi_B^(c_B) * prod_{A contains B} (sum_{x_A \\ x_B} Q_A) / mu_{B->A},
    mu_{B->A}  <-  Q_B / ((sum_{x_A \\ x_B} Q_A) / mu_{B->A}),

where ``n_B`` counts the outer regions containing ``B``.  Inner regions are
colored so that no two in one color share an outer region.  Colors are swept
in a fixed order, each as one vectorized block.  Outer beliefs are refreshed
in place after every block.  Regions with counting number 0 do not enter
``F_K``.  Their beliefs are marginals of the first outer region containing
them.

``"parent-to-child"`` is the classic scheme on Hasse edges:
``b_R ~ prod_{a in A_R} f_a * prod_{(I, J) in M(R)} m_{I->J}``, where ``M(R)``
holds every edge entering ``R`` or one of its descendants from outside that
set.  All edges are updated synchronously from the previous sweep via

    m_{P->C}  <-  m_{P->C} * sum_{x_P \\ x_C} b~_P / b~_C.

It is exact on small graphs but unstable on sliding-window graphs of lattices
larger than 4x4, so it is kept for cross-checks only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
import scipy.sparse as sp

from .factor_model import FactorGraph, LogConstantLedger
from .region_graph import RegionGraph, RegionGraphError

SCHEDULES = ("outer-inner", "parent-to-child")


@dataclass(frozen=True)
class GBPConfig:
    damping: float = 0.5
    max_iters: int = 2000
    tolerance: float = 1e-8
    schedule: str = "outer-inner"
    anderson: int = 10

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError(f"damping must be in [0, 1), got {self.damping}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.anderson < 0:
            raise ValueError("anderson history must be >= 0")


@dataclass
class MessageSet:
    """Log-domain message tables, one per edge, flattened into ``values``.

    ``kind`` is ``"parent-to-child"`` (edges are Hasse edges ``(P, C)``) or
    ``"outer-inner"`` (edges are ``(outer, inner)`` pairs carrying
    ``mu_{inner->outer}``).  Tables are over the second region's states.
    """

    edges: tuple[tuple[int, int], ...]
    offsets: np.ndarray
    shapes: tuple[tuple[int, ...], ...]
    values: np.ndarray = field(repr=False)
    kind: str = "parent-to-child"

    def table(self, k: int) -> np.ndarray:
        lo = self.offsets[k]
        return self.values[lo : lo + math.prod(self.shapes[k])].reshape(self.shapes[k])

    def __len__(self):
        return len(self.edges)


@dataclass
class RegionBeliefs:
    offsets: np.ndarray
    shapes: tuple[tuple[int, ...], ...]
    values: np.ndarray = field(repr=False)  # probabilities, flattened per region

    def table(self, rid: int) -> np.ndarray:
        lo = self.offsets[rid]
        return self.values[lo : lo + math.prod(self.shapes[rid])].reshape(self.shapes[rid])

    def __len__(self):
        return len(self.shapes)


@dataclass(frozen=True)
class FreeEnergyEstimate:
    minus_log_z: float
    per_symbol: float
    converged: bool
    iterations: int
    max_residual: float


def _uniform(counts: np.ndarray) -> int:
    """Common segment length, or 0 if segments differ in length."""
    return int(counts[0]) if counts.size and np.all(counts == counts[0]) else 0


def _segment_max(x: np.ndarray, starts: np.ndarray, width: int = 0) -> np.ndarray:
    return x.reshape(-1, width).max(axis=1) if width else np.maximum.reduceat(x, starts)


def _segment_lse(x: np.ndarray, starts: np.ndarray, counts: np.ndarray, width: int = 0) -> np.ndarray:
    if x.size == 0:
        return x
    if width:
        x2 = x.reshape(-1, width)
        mx = x2.max(axis=1)
        with np.errstate(invalid="ignore"):
            return mx + np.log(np.exp(x2 - mx[:, None]).sum(axis=1))
    mx = np.maximum.reduceat(x, starts)
    with np.errstate(invalid="ignore"):
        s = np.add.reduceat(np.exp(x - np.repeat(mx, counts)), starts)
    return mx + np.log(s)


def _offsets(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    return np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64) if counts.size else counts


def _sub_index(digits: np.ndarray, positions: list[int], shape: tuple[int, ...]) -> np.ndarray:
    if not positions:
        return np.zeros(digits.shape[0], dtype=np.int64)
    return np.ravel_multi_index(tuple(digits[:, positions].T), shape).astype(np.int64)


def _ones(rows, cols, shape) -> sp.csr_matrix:
    if rows:
        r, c = np.concatenate(rows), np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.int64)
    m = sp.csr_matrix((np.ones(r.size), (r, c)), shape=shape)
    m.sum_duplicates()
    return m


def _group_by(keys: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stable order that groups ``keys``, plus segment starts and counts."""
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n_groups)
    return order, _offsets(counts), counts


class RegionLayout:
    """Flattened state layout of every region, with factor gathers."""

    def __init__(self, g: RegionGraph, fg: FactorGraph):
        sizes = fg.domain_sizes
        self.n_vars = fg.n_vars
        self.shapes = tuple(tuple(sizes[v] for v in r.var_set) for r in g.regions)
        self.counts = np.array([math.prod(s) for s in self.shapes], dtype=np.int64)
        self.offsets = _offsets(self.counts)
        self.n_states = int(self.counts.sum())
        self.counting = np.array([r.counting_number for r in g.regions], dtype=float)
        self.digits = [np.indices(s).reshape(len(s), -1).T for s in self.shapes]
        self.pos = [{v: i for i, v in enumerate(r.var_set)} for r in g.regions]
        self.factor_offsets = _offsets([f.table.size for f in fg.factors])
        self.n_factor_entries = int(sum(f.table.size for f in fg.factors))

        rows, cols = [], []
        for r in g.regions:
            base = self.offsets[r.id] + np.arange(self.counts[r.id])
            for a in r.assigned_factors:
                rows.append(base)
                cols.append(self.factor_offsets[a] + self.project(r.id, fg.factors[a].scope, fg.factors[a].table.shape))
        self.gather_factors = _ones(rows, cols, (self.n_states, self.n_factor_entries))

    def project(self, rid: int, var_set, shape) -> np.ndarray:
        """Index of each state of region ``rid`` in a table over ``var_set``."""
        return _sub_index(self.digits[rid], [self.pos[rid][v] for v in var_set], tuple(shape))

    def states(self, rid: int) -> np.ndarray:
        return self.offsets[rid] + np.arange(self.counts[rid])

    def log_potentials(self, fg: FactorGraph) -> np.ndarray:
        """``-E_R`` for every region state (all factors inside ``R``)."""
        return self.gather_factors @ _flat_tables(fg)

    def normalize(self, logb: np.ndarray) -> np.ndarray:
        return logb - np.repeat(_segment_lse(logb, self.offsets, self.counts), self.counts)

    def kikuchi(self, logphi: np.ndarray, log_belief: np.ndarray) -> float:
        b = np.exp(log_belief)
        weight = np.repeat(self.counting, self.counts)
        with np.errstate(invalid="ignore"):
            terms = weight * b * (log_belief - logphi)
        terms[b == 0.0] = 0.0
        return math.fsum(np.add.reduceat(terms, self.offsets)) if terms.size else 0.0


def _flat_tables(fg: FactorGraph) -> np.ndarray:
    return np.concatenate([f.table.reshape(-1) for f in fg.factors]) if fg.factors else np.zeros(0)


class ParentChildPlan:
    """Index structure for synchronous parent-to-child updates."""

    def __init__(self, g: RegionGraph, fg: FactorGraph, layout: RegionLayout | None = None):
        self.layout = layout or RegionLayout(g, fg)
        lay = self.layout
        self.edges = tuple(g.edges)
        self.msg_shapes = tuple(lay.shapes[c] for _, c in self.edges)
        self.msg_counts = np.array([lay.counts[c] for _, c in self.edges], dtype=np.int64)
        self.msg_offsets = _offsets(self.msg_counts)
        self.n_msg = int(self.msg_counts.sum())

        # M(R): edges entering R or its descendants from outside that set
        down = [g.descendants(r.id) | {r.id} for r in g.regions]
        into: dict[int, list[int]] = {}
        for k, (_, c) in enumerate(self.edges):
            into.setdefault(c, []).append(k)
        self.incoming = []
        rows, cols = [], []
        for r in g.regions:
            inc = sorted(k for j in down[r.id] for k in into.get(j, ()) if self.edges[k][0] not in down[r.id])
            self.incoming.append(inc)
            for k in inc:
                j = self.edges[k][1]
                rows.append(lay.states(r.id))
                cols.append(self.msg_offsets[k] + lay.project(r.id, g.regions[j].var_set, lay.shapes[j]))
        self.gather_messages = _ones(rows, cols, (lay.n_states, self.n_msg))

        src, grp = [], []
        for k, (p, c) in enumerate(self.edges):
            src.append(lay.states(p))
            grp.append(self.msg_offsets[k] + lay.project(p, g.regions[c].var_set, lay.shapes[c]))
        if src:
            src_a, grp_a = np.concatenate(src), np.concatenate(grp)
            order, self.marg_starts, self.marg_counts = _group_by(grp_a, self.n_msg)
            self.marg_src = src_a[order]
            self.child_rows = np.concatenate([lay.states(c) for _, c in self.edges])
        else:
            self.marg_src = self.marg_starts = self.marg_counts = self.child_rows = np.zeros(0, dtype=np.int64)

    def normalize_messages(self, logm: np.ndarray) -> np.ndarray:
        return logm - np.repeat(_segment_lse(logm, self.msg_offsets, self.msg_counts), self.msg_counts)

    def unnormalized_beliefs(self, logphi: np.ndarray, logm: np.ndarray) -> np.ndarray:
        return logphi + self.gather_messages @ logm

    def update(self, logphi: np.ndarray, logm: np.ndarray) -> np.ndarray:
        logb = self.unnormalized_beliefs(logphi, logm)
        marg = _segment_lse(logb[self.marg_src], self.marg_starts, self.marg_counts)
        return self.normalize_messages(marg - logb[self.child_rows] + logm)


@dataclass
class _Block:
    """Links of inner regions that share no outer region."""

    ent: np.ndarray  # message entries updated by the block
    src: np.ndarray  # outer states, grouped by the entry they marginalize to
    m_starts: np.ndarray
    m_counts: np.ndarray
    sum_links: sp.csr_matrix  # inner entries x block entries
    expo: np.ndarray  # 1 / (n_B + c_B) per inner entry
    phi_rows: np.ndarray  # layout rows of the block's inner states
    c_phi: np.ndarray  # c_B per inner entry
    i_starts: np.ndarray
    i_counts: np.ndarray
    l2i: np.ndarray  # block entry -> local inner entry
    l_starts: np.ndarray
    l_counts: np.ndarray
    m_width: int = 0  # common segment lengths, 0 when ragged
    i_width: int = 0
    l_width: int = 0


class OuterInnerPlan:
    """Index structure for the outer/inner message scheme."""

    def __init__(self, g: RegionGraph, fg: FactorGraph, layout: RegionLayout | None = None):
        self.layout = layout or RegionLayout(g, fg)
        lay = self.layout
        self.outer = [r.id for r in g.regions if not g.parents(r.id)]
        bad = [o for o in self.outer if g.regions[o].counting_number != 1]
        if bad:
            raise RegionGraphError(f"outer region {bad[0]} has counting number {g.regions[bad[0]].counting_number}, not 1")
        self.inner = [r.id for r in g.regions if g.parents(r.id) and r.counting_number != 0]
        outer_set = set(self.outer)

        o_counts = lay.counts[self.outer]
        self.o_counts = o_counts
        self.o_offsets = _offsets(o_counts)
        self.n_outer_states = int(o_counts.sum())
        o_local = {o: i for i, o in enumerate(self.outer)}
        o_states = lambda o: self.o_offsets[o_local[o]] + np.arange(lay.counts[o])  # noqa: E731

        self.links: list[tuple[int, int]] = []
        expo = {}
        for b in self.inner:
            hosts = sorted(g.ancestors(b) & outer_set)
            denom = len(hosts) + g.regions[b].counting_number
            if denom == 0:
                raise RegionGraphError(f"inner region {b}: n_B + c_B = 0")
            expo[b] = 1.0 / denom
            self.links.extend((o, b) for o in hosts)
        self.l_counts = np.array([lay.counts[b] for _, b in self.links], dtype=np.int64)
        self.l_offsets = _offsets(self.l_counts)
        self.n_link = int(self.l_counts.sum())

        rows, cols = [], []
        link_src, link_dst = [], []
        for k, (o, b) in enumerate(self.links):
            idx = self.l_offsets[k] + lay.project(o, g.regions[b].var_set, lay.shapes[b])
            rows.append(o_states(o))
            cols.append(idx)
            link_src.append(o_states(o))
            link_dst.append(idx)
        self.gather_mu = _ones(rows, cols, (self.n_outer_states, self.n_link))
        self.blocks = self._build_blocks(g, link_src, link_dst, expo)

        # every region's belief is a marginal of its first containing outer region
        src, grp = [], []
        for r in g.regions:
            o = r.id if r.id in outer_set else min(g.ancestors(r.id) & outer_set)
            src.append(o_states(o))
            grp.append(lay.offsets[r.id] + lay.project(o, r.var_set, lay.shapes[r.id]))
        src_a, grp_a = np.concatenate(src), np.concatenate(grp)
        order, self.bel_starts, self.bel_counts = _group_by(grp_a, lay.n_states)
        self.bel_src = src_a[order]
        self.outer_rows = np.concatenate([lay.states(o) for o in self.outer]) if self.outer else np.zeros(0, np.int64)

    def _build_blocks(self, g, link_src, link_dst, expo) -> list[_Block]:
        by_inner: dict[int, list[int]] = {}
        for k, (o, b) in enumerate(self.links):
            by_inner.setdefault(b, []).append(k)
        sharers: dict[int, list[int]] = {}
        for o, b in self.links:
            sharers.setdefault(o, []).append(b)
        color: dict[int, int] = {}
        for b in self.inner:
            used = {color[x] for o, _ in (self.links[k] for k in by_inner[b]) for x in sharers[o] if x in color}
            color[b] = next(c for c in range(len(self.inner) + 1) if c not in used)
        blocks = []
        for c in sorted(set(color.values())):
            members = [b for b in self.inner if color[b] == c]
            ks = [k for b in members for k in by_inner[b]]
            ent = np.concatenate([self.l_offsets[k] + np.arange(self.l_counts[k]) for k in ks])
            pos = np.full(self.n_link, -1, dtype=np.int64)
            pos[ent] = np.arange(ent.size)
            src = np.concatenate([link_src[k] for k in ks])
            dst = pos[np.concatenate([link_dst[k] for k in ks])]
            order, m_starts, m_counts = _group_by(dst, ent.size)
            src = src[order]
            if np.unique(src).size != src.size:
                raise AssertionError("block links overlap in an outer region")
            i_counts = np.array([self.layout.counts[b] for b in members], dtype=np.int64)
            i_offsets = _offsets(i_counts)
            l2i = np.concatenate(
                [i_offsets[j] + np.arange(self.l_counts[k]) for j, b in enumerate(members) for k in by_inner[b]]
            )
            sum_links = sp.csr_matrix(
                (np.ones(ent.size), (l2i, np.arange(ent.size))), shape=(int(i_counts.sum()), ent.size)
            )
            l_counts = self.l_counts[ks]
            blocks.append(
                _Block(
                    ent=ent,
                    src=src,
                    m_starts=m_starts,
                    m_counts=m_counts,
                    sum_links=sum_links,
                    expo=np.repeat([expo[b] for b in members], i_counts),
                    phi_rows=np.concatenate([self.layout.states(b) for b in members]),
                    c_phi=np.repeat([float(g.regions[b].counting_number) for b in members], i_counts),
                    i_starts=i_offsets,
                    i_counts=i_counts,
                    l2i=l2i,
                    l_starts=_offsets(l_counts),
                    l_counts=l_counts,
                    m_width=_uniform(m_counts),
                    i_width=_uniform(i_counts),
                    l_width=_uniform(l_counts),
                )
            )
        return blocks

    def sweep(self, logphi: np.ndarray, mu: np.ndarray, damping: float) -> float:
        """One pass over the color blocks; updates ``mu`` in place."""
        lq = logphi[self.outer_rows] + self.gather_mu @ mu
        residual = 0.0
        for b in self.blocks:
            old = mu[b.ent]
            cav = _segment_lse(lq[b.src], b.m_starts, b.m_counts, b.m_width) - old
            lqb = (b.sum_links @ cav + b.c_phi * logphi[b.phi_rows]) * b.expo
            lqb -= np.repeat(_segment_max(lqb, b.i_starts, b.i_width), b.i_counts)
            new = lqb[b.l2i] - cav
            if damping > 0:
                new = (1.0 - damping) * new + damping * old
            new -= np.repeat(_segment_max(new, b.l_starts, b.l_width), b.l_counts)
            delta = new - old
            step = float(np.max(np.abs(delta)))
            if not math.isfinite(step):
                return math.nan
            residual = max(residual, step)
            lq[b.src] += np.repeat(delta, b.m_width) if b.m_width else np.repeat(delta, b.m_counts)
            mu[b.ent] = new
        return residual

    def normalize(self, mu: np.ndarray) -> np.ndarray:
        """Max-normalize every link table."""
        return mu - np.repeat(_segment_max(mu, self.l_offsets, 0), self.l_counts)

    def region_log_beliefs(self, logphi: np.ndarray, mu: np.ndarray) -> np.ndarray:
        lq = logphi[self.outer_rows] + self.gather_mu @ mu
        lq -= np.repeat(_segment_lse(lq, self.o_offsets, self.o_counts), self.o_counts)
        return _segment_lse(lq[self.bel_src], self.bel_starts, self.bel_counts)


_PLAN_CACHE: dict = {}
_PLAN_CACHE_SIZE = 4


def _structure_key(g: RegionGraph, fg: FactorGraph) -> tuple:
    return (
        tuple(r.var_set for r in g.regions),
        tuple(r.assigned_factors for r in g.regions),
        tuple(r.counting_number for r in g.regions),
        g.edges,
        fg.scopes,
        fg.domain_sizes,
    )


def compile_plan(g: RegionGraph, fg: FactorGraph, schedule: str = "outer-inner"):
    """Build (or reuse) the plan for this graph and factor-scope structure."""
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    key = _structure_key(g, fg)
    entry = _PLAN_CACHE.get(key)
    if entry is None:
        if len(_PLAN_CACHE) >= _PLAN_CACHE_SIZE:
            _PLAN_CACHE.pop(next(iter(_PLAN_CACHE)))
        entry = _PLAN_CACHE[key] = {"layout": RegionLayout(g, fg)}
    if schedule not in entry:
        cls = OuterInnerPlan if schedule == "outer-inner" else ParentChildPlan
        entry[schedule] = cls(g, fg, entry["layout"])
    return entry[schedule]


def _layout(g: RegionGraph, fg: FactorGraph) -> RegionLayout:
    key = _structure_key(g, fg)
    entry = _PLAN_CACHE.get(key)
    return entry["layout"] if entry is not None else RegionLayout(g, fg)


def init_messages(g: RegionGraph, fg: FactorGraph) -> MessageSet:
    """Uniform parent-to-child messages, one normalized table per Hasse edge."""
    sizes = fg.domain_sizes
    shapes = tuple(tuple(sizes[v] for v in g.regions[c].var_set) for _, c in g.edges)
    counts = [math.prod(s) for s in shapes]
    values = np.concatenate([np.full(n, -math.log(n)) for n in counts]) if counts else np.zeros(0)
    return MessageSet(tuple(g.edges), _offsets(counts), shapes, values)


def _outer_inner_messages(plan: OuterInnerPlan, mu: np.ndarray) -> MessageSet:
    lay = plan.layout
    logm = mu - np.repeat(_segment_lse(mu, plan.l_offsets, plan.l_counts), plan.l_counts) if mu.size else mu
    shapes = tuple(lay.shapes[b] for _, b in plan.links)
    return MessageSet(tuple(plan.links), plan.l_offsets, shapes, logm, kind="outer-inner")


def region_beliefs(g: RegionGraph, fg: FactorGraph, messages: MessageSet) -> RegionBeliefs:
    """Normalized beliefs of every region under ``messages``."""
    if messages.kind == "outer-inner":
        plan = compile_plan(g, fg, "outer-inner")
        logb = plan.region_log_beliefs(plan.layout.log_potentials(fg), messages.values)
    else:
        plan = compile_plan(g, fg, "parent-to-child")
        lay = plan.layout
        logb = lay.normalize(plan.unnormalized_beliefs(lay.log_potentials(fg), messages.values))
    lay = plan.layout
    return RegionBeliefs(lay.offsets, lay.shapes, np.exp(logb))


def kikuchi_free_energy(g: RegionGraph, fg: FactorGraph, beliefs: RegionBeliefs) -> float:
    """``sum_R c_R sum_x b_R (E_R + ln b_R)`` in nats, for normalized beliefs.

    ``E_R`` is minus the sum of the (normalized) log-tables assigned to ``R``;
    ledger constants are the caller's business.
    """
    lay = _layout(g, fg)
    sums = np.add.reduceat(beliefs.values, lay.offsets) if beliefs.values.size else np.zeros(0)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-8)
    if bad.size:
        raise ValueError(f"belief of region {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
    if np.any(beliefs.values < 0):
        raise ValueError("beliefs must be nonnegative")
    with np.errstate(divide="ignore"):
        logb = np.log(beliefs.values)
    return lay.kikuchi(lay.log_potentials(fg), logb)


class _Anderson:
    """Anderson mixing over the last ``depth`` sweep maps ``x -> G(x)``.

    Differences of residuals and images live in ring buffers with an
    incrementally updated Gram matrix.  The history is dropped when the
    residual jumps, so a bad extrapolation costs one plain sweep.
    """

    def __init__(self, depth: int, reg: float = 1e-10):
        self.depth = depth
        self.reg = reg
        self.df: np.ndarray | None = None
        self.dg: np.ndarray | None = None
        self.gram = np.zeros((depth, depth))
        self.size = 0
        self.slot = 0
        self.prev: tuple[np.ndarray, np.ndarray] | None = None
        self.last = math.inf

    def mix(self, x: np.ndarray, gx: np.ndarray, residual: float) -> np.ndarray:
        f = gx - x
        if residual > 10.0 * self.last:
            self.size = 0
            self.prev = None
        self.last = residual
        if self.df is None:
            self.df = np.empty((self.depth, x.size))
            self.dg = np.empty((self.depth, x.size))
        if self.prev is not None:
            k = self.slot
            np.subtract(f, self.prev[0], out=self.df[k])
            np.subtract(gx, self.prev[1], out=self.dg[k])
            self.size = min(self.size + 1, self.depth)
            row = self.df[: self.size] @ self.df[k]
            self.gram[k, : self.size] = row
            self.gram[: self.size, k] = row
            self.slot = (k + 1) % self.depth
        self.prev = (f, gx)
        if self.size == 0:
            return gx
        n = self.size
        a = self.gram[:n, :n] + (self.reg * np.trace(self.gram[:n, :n]) + 1e-300) * np.eye(n)
        try:
            gamma = np.linalg.solve(a, self.df[:n] @ f)
        except np.linalg.LinAlgError:
            return gx
        out = gx - gamma @ self.dg[:n]
        return out if np.all(np.isfinite(out)) else gx


def _monotone_tail(history: list[float], width: int = 10) -> bool:
    tail = history[-width:]
    return all(b <= a for a, b in zip(tail, tail[1:]))


def run_gbp(
    g: RegionGraph,
    fg: FactorGraph,
    ledger: LogConstantLedger,
    config: GBPConfig | None = None,
    trace: TextIO | None = None,
) -> tuple[MessageSet, FreeEnergyEstimate, RegionBeliefs]:
    """Iterate damped GBP to a fixed point.

    Damping mixes each new log-message with the old one,
    ``(1 - damping) * new + damping * old``.  For the outer-inner schedule
    the damped sweep map is further Anderson-accelerated over the last
    ``config.anderson`` sweeps (0 disables it); the residual is always the
    change made by the plain sweep.  The run stops once the largest
    absolute log-message change drops below ``config.tolerance`` and the
    residual has not risen over the last ten sweeps; otherwise it runs to
    ``max_iters`` (or to the first non-finite residual) and reports
    ``converged=False``.  If ``trace`` is given, one CSV row
    ``iteration,max_residual,free_energy`` is written per sweep.
    """
    config = config or GBPConfig()
    plan = compile_plan(g, fg, config.schedule)
    lay = plan.layout
    writer = csv.writer(trace, lineterminator="\n") if trace is not None else None
    if writer:
        writer.writerow(["iteration", "max_residual", "free_energy"])

    d = config.damping
    if config.schedule == "outer-inner":
        logphi = lay.log_potentials(fg)
        state = np.zeros(plan.n_link)
        accel = _Anderson(config.anderson) if config.anderson else None

        def step():
            if accel is None:
                return plan.sweep(logphi, state, d)
            x = state.copy()
            res = plan.sweep(logphi, state, d)
            if math.isfinite(res):
                state[:] = plan.normalize(accel.mix(x, state.copy(), res))
            return res

        def beliefs():
            return plan.region_log_beliefs(logphi, state)

        def energy(logb):
            return lay.kikuchi(logphi, logb)

    else:
        logphi = lay.log_potentials(fg)
        state = init_messages(g, fg).values.copy()

        def step():
            new = plan.update(logphi, state)
            if d > 0:
                new = plan.normalize_messages((1.0 - d) * new + d * state)
            res = float(np.max(np.abs(new - state))) if new.size else 0.0
            state[:] = new
            return res

        def beliefs():
            return lay.normalize(plan.unnormalized_beliefs(logphi, state))

        def energy(logb):
            return lay.kikuchi(logphi, logb)

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        residual = step()
        history.append(residual)
        if writer:
            writer.writerow([it, repr(residual), repr(energy(beliefs()))])
        if not math.isfinite(residual):
            break
        if residual < config.tolerance and _monotone_tail(history):
            converged = True
            break

    logb = beliefs()
    minus_log_z = energy(logb) - ledger.total
    if config.schedule == "outer-inner":
        messages = _outer_inner_messages(plan, state)
    else:
        messages = MessageSet(plan.edges, plan.msg_offsets, plan.msg_shapes, state)
    estimate = FreeEnergyEstimate(
        minus_log_z=minus_log_z,
        per_symbol=minus_log_z / fg.n_vars,
        converged=converged,
        iterations=it,
        max_residual=history[-1] if history else 0.0,
    )
    return messages, estimate, RegionBeliefs(lay.offsets, lay.shapes, np.exp(logb))
