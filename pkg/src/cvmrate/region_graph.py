"""Cluster-variation region graphs built from sliding lattice windows.

Outer regions are all ``w x w`` blocks of the lattice.  The region set is
closed under intersection, edges form the Hasse diagram of strict inclusion,
and counting numbers follow the Moebius recursion

    c_R = 1 - sum_{A strictly contains R} c_A.

A factor is assigned to every region containing its scope; the graph is valid
when every variable and every factor is counted exactly once.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .factor_model import FactorGraph


class RegionGraphError(ValueError):
    pass


class UncoveredFactorError(RegionGraphError):
    def __init__(self, factor_name: str, scope):
        super().__init__(f"uncovered-factor: factor {factor_name} with scope {tuple(scope)} lies in no region")
        self.factor_name = factor_name
        self.scope = tuple(scope)


@dataclass(frozen=True)
class Region:
    id: int
    var_set: tuple[int, ...]
    assigned_factors: tuple[int, ...] = ()
    counting_number: int | None = None


@dataclass(frozen=True)
class RegionGraph:
    regions: tuple[Region, ...]
    edges: tuple[tuple[int, int], ...]  # (parent id, child id)
    _parents: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        parents = defaultdict(list)
        children = defaultdict(list)
        for p, c in self.edges:
            parents[c].append(p)
            children[p].append(c)
        object.__setattr__(self, "_parents", (dict(parents), dict(children)))

    def parents(self, rid: int) -> list[int]:
        return self._parents[0].get(rid, [])

    def children(self, rid: int) -> list[int]:
        return self._parents[1].get(rid, [])

    def descendants(self, rid: int) -> set[int]:
        out, stack = set(), list(self.children(rid))
        while stack:
            r = stack.pop()
            if r not in out:
                out.add(r)
                stack.extend(self.children(r))
        return out

    def ancestors(self, rid: int) -> set[int]:
        out, stack = set(), list(self.parents(rid))
        while stack:
            r = stack.pop()
            if r not in out:
                out.add(r)
                stack.extend(self.parents(r))
        return out

    @property
    def counting_numbers(self) -> list[int | None]:
        return [r.counting_number for r in self.regions]


def generate_outer_regions(size_n: int, window: int = 3) -> list[tuple[int, ...]]:
    """All ``window x window`` blocks, stride 1, in raster order (0-based ids)."""
    if window < 2:
        raise RegionGraphError(f"window must be >= 2, got {window}")
    if window > size_n:
        raise RegionGraphError(f"window {window} larger than lattice size {size_n}")
    out = []
    for r0 in range(size_n - window + 1):
        for c0 in range(size_n - window + 1):
            out.append(
                tuple(sorted((r0 + i) * size_n + c0 + j for i in range(window) for j in range(window)))
            )
    return out


def _by_variable(sets: Iterable[frozenset]) -> dict[int, list[frozenset]]:
    index = defaultdict(list)
    for s in sets:
        for v in s:
            index[v].append(s)
    return index


def _closure(outer: Sequence[frozenset]) -> set[frozenset]:
    regions = set(outer)
    index = _by_variable(regions)
    work = list(regions)
    while work:
        a = work.pop()
        partners = {b for v in a for b in index[v]}
        for b in partners:
            inter = a & b
            if inter and inter not in regions:
                regions.add(inter)
                for v in inter:
                    index[v].append(inter)
                work.append(inter)
    return regions


def _hasse_edges(sets: Sequence[frozenset]) -> list[tuple[int, int]]:
    index = _by_variable(sets)
    pos = {s: i for i, s in enumerate(sets)}
    edges = []
    for i, s in enumerate(sets):
        v0 = next(iter(s))
        supers = [t for t in index[v0] if len(t) > len(s) and s < t]
        for t in supers:
            if not any(u < t and s < u for u in supers):
                edges.append((pos[t], i))
    edges.sort()
    return edges


def _make_graph(sets: Iterable[frozenset]) -> RegionGraph:
    ordered = sorted(sets, key=lambda s: (-len(s), sorted(s)))
    regions = tuple(Region(i, tuple(sorted(s))) for i, s in enumerate(ordered))
    return RegionGraph(regions, tuple(_hasse_edges(ordered)))


def close_under_intersection(outer: Iterable[Iterable[int]]) -> RegionGraph:
    """Add pairwise intersections until fixpoint; ids ordered by decreasing size."""
    sets = [frozenset(s) for s in outer]
    if any(not s for s in sets):
        raise RegionGraphError("outer regions must be nonempty")
    return _make_graph(_closure(sets))


def _missing_intersections(sets: Sequence[frozenset]) -> list[frozenset]:
    present = set(sets)
    index = _by_variable(sets)
    missing = []
    for a in sets:
        for b in {b for v in a for b in index[v]}:
            inter = a & b
            if inter and inter not in present:
                missing.append(inter)
                present.add(inter)
    return missing


def compute_counting_numbers(g: RegionGraph) -> RegionGraph:
    sets = [frozenset(r.var_set) for r in g.regions]
    if _missing_intersections(sets):
        raise RegionGraphError("region graph is not closed under intersection")
    order = sorted(range(len(sets)), key=lambda i: -len(sets[i]))
    counts: dict[int, int] = {}
    for i in order:
        counts[i] = 1 - sum(counts[a] for a in g.ancestors(g.regions[i].id))
    return replace(g, regions=tuple(replace(r, counting_number=counts[k]) for k, r in enumerate(g.regions)))


def assign_factors(g: RegionGraph, fg: FactorGraph) -> RegionGraph:
    """Assign each factor to every region containing its scope."""
    if any(r.counting_number is None for r in g.regions):
        raise RegionGraphError("counting numbers must be computed before assigning factors")
    by_var = defaultdict(list)
    for r in g.regions:
        for v in r.var_set:
            by_var[v].append(r.id)
    assigned = defaultdict(list)
    for a, f in enumerate(fg.factors):
        scope = set(f.scope)
        holders = [rid for rid in by_var.get(f.scope[0], []) if scope <= set(g.regions[rid].var_set)]
        if not holders:
            raise UncoveredFactorError(f.name, f.scope)
        for rid in holders:
            assigned[rid].append(a)
    regions = tuple(replace(r, assigned_factors=tuple(assigned.get(r.id, ()))) for r in g.regions)
    return replace(g, regions=regions)


@dataclass
class ValidationReport:
    variable_sums: dict[int, int]
    factor_sums: dict[int, int]
    closed: bool
    acyclic: bool
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "closed": self.closed,
            "acyclic": self.acyclic,
            "variable_sums_all_one": all(v == 1 for v in self.variable_sums.values()),
            "factor_sums_all_one": all(v == 1 for v in self.factor_sums.values()),
            "failures": list(self.failures),
        }


def _is_acyclic(g: RegionGraph) -> bool:
    indeg = defaultdict(int)
    for _, c in g.edges:
        indeg[c] += 1
    ready = [r.id for r in g.regions if indeg[r.id] == 0]
    seen = 0
    while ready:
        r = ready.pop()
        seen += 1
        for c in g.children(r):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return seen == len(g.regions)


def validate_region_graph(g: RegionGraph, fg: FactorGraph | None = None) -> ValidationReport:
    failures = []
    var_sums: dict[int, int] = defaultdict(int)
    for r in g.regions:
        if r.counting_number is None:
            failures.append(f"region {r.id} has no counting number")
            continue
        for v in r.var_set:
            var_sums[v] += r.counting_number
    n_vars = fg.n_vars if fg is not None else (max(var_sums) + 1 if var_sums else 0)
    for v in range(n_vars):
        if var_sums.get(v, 0) != 1:
            failures.append(f"variable {v} counted {var_sums.get(v, 0)} times")

    factor_sums: dict[int, int] = {}
    if fg is not None:
        holders = defaultdict(int)
        for r in g.regions:
            for a in r.assigned_factors:
                holders[a] += r.counting_number or 0
        for a, f in enumerate(fg.factors):
            factor_sums[a] = holders.get(a, 0)
            if factor_sums[a] != 1:
                failures.append(f"factor {f.name} counted {factor_sums[a]} times")

    missing = _missing_intersections([frozenset(r.var_set) for r in g.regions])
    if missing:
        failures.append(f"not closed under intersection: {len(missing)} missing, e.g. {sorted(missing[0])}")
    acyclic = _is_acyclic(g)
    if not acyclic:
        failures.append("region graph has a directed cycle")
    for p, c in g.edges:
        if not set(g.regions[c].var_set) < set(g.regions[p].var_set):
            failures.append(f"edge {p}->{c} is not a strict inclusion")
    return ValidationReport(dict(var_sums), factor_sums, not missing, acyclic, failures)


def build_region_graph(size_n: int, fg: FactorGraph, window: int = 3) -> RegionGraph:
    """Sliding-window region graph with counting numbers and factors; raises if invalid."""
    g = close_under_intersection(generate_outer_regions(size_n, window))
    g = assign_factors(compute_counting_numbers(g), fg)
    report = validate_region_graph(g, fg)
    if not report.ok:
        raise RegionGraphError("; ".join(report.failures))
    return g
