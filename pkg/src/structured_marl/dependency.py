"""Value-dependency, gradient-dependency and combined dependency sets.

Three independent routes to I_Q are provided and cross-checked in tests:
the backward U-set recursion, predecessor tracing on the full network, and
fold-bounded search on the folded network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import networkx as nx

from .coupling import (CouplingGraphs, IndexSets, TimeVaryingIndexSets, derive_index_sets,
                       time_invariant, transpose_edges)
from .mabn import (ACTION, OPTIMALITY, STATE, FoldedMabn, Mabn, MabnNode,
                   bounded_reach_sources, build_folded)

Sets = dict[int, frozenset[int]]


def _edges_from_sets(sets: Mapping[int, frozenset[int]]) -> frozenset[tuple[int, int]]:
    return frozenset((j, i) for i, s in sets.items() for j in s)


def _sorted(sets: Mapping[int, frozenset[int]]) -> dict[int, list[int]]:
    return {i: sorted(sets[i]) for i in sorted(sets)}


@dataclass(frozen=True)
class ValueDependency:
    """I_Q^i at time ``t``; ``horizon`` is None for the static fixed point."""

    sets: Mapping[int, frozenset[int]]
    t: int = 0
    horizon: Optional[int] = None

    @property
    def n_agents(self) -> int:
        return len(self.sets)

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return _edges_from_sets(self.sets)

    def as_lists(self) -> dict[int, list[int]]:
        return _sorted(self.sets)


@dataclass(frozen=True)
class GradientDependency:
    sets: Mapping[int, frozenset[int]]
    edges: frozenset[tuple[int, int]]

    def as_lists(self) -> dict[int, list[int]]:
        return _sorted(self.sets)


@dataclass(frozen=True)
class KappaDependency:
    kappa: int
    sets: Mapping[int, frozenset[int]]

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return _edges_from_sets(self.sets)

    def as_value_dependency(self) -> ValueDependency:
        return ValueDependency(self.sets, 0, self.kappa + 1)


def _as_tv(idx, horizon: int) -> TimeVaryingIndexSets:
    if isinstance(idx, IndexSets):
        return time_invariant(idx, horizon)
    if len(idx) != horizon + 1:
        raise ValueError(f"index sets cover {len(idx)} steps but horizon {horizon} needs "
                         f"{horizon + 1}")
    return tuple(idx)


def _u_base(idx: IndexSets, i: int) -> set[int]:
    out = set()
    for j in idx.i_r[i]:
        out |= idx.i_o[j]
    return out


def _u_step(idx_now: IndexSets, idx_next: IndexSets, i: int, u_next: set[int]) -> set[int]:
    out = _u_base(idx_now, i)
    for j in u_next:
        for k in idx_next.i_s[j]:
            out |= idx_now.i_o[k]
    return out


def u_sets(idx, t: int, horizon: int) -> dict[int, list[frozenset[int]]]:
    """U_i^tau for tau = t..T, listed in increasing tau."""
    if not 0 <= t <= horizon:
        raise ValueError(f"need 0 <= t <= T, got t={t}, T={horizon}")
    tv = _as_tv(idx, horizon)
    out = {}
    for i in sorted(tv[0].i_s):
        seq = [_u_base(tv[horizon], i)]
        for tau in range(horizon - 1, t - 1, -1):
            seq.append(_u_step(tv[tau], tv[tau + 1], i, seq[-1]))
        out[i] = [frozenset(u) for u in reversed(seq)]
    return out


def value_dependency(idx, t: int = 0, horizon: Optional[int] = None) -> ValueDependency:
    """I_Q^i(t) as the union of U_i^tau over tau = t..T.

    With ``horizon=None`` the index sets must be time-invariant and the
    recursion runs until U stops growing, which is the infinite-horizon answer.
    """
    if horizon is not None:
        sets = {i: frozenset().union(*seq) for i, seq in u_sets(idx, t, horizon).items()}
        return ValueDependency(sets, t, horizon)
    if not isinstance(idx, IndexSets):
        raise TypeError("the fixed-point route needs time-invariant IndexSets")
    sets = {}
    for i in sorted(idx.i_s):
        u = _u_base(idx, i)
        while True:
            nxt = _u_step(idx, idx, i, u)
            # U only grows backward in time for static graphs, so equality is the fixed point
            if nxt == u:
                break
            u = nxt
        sets[i] = frozenset(u)
    return ValueDependency(sets, t, None)


def value_dependency_by_pathfinding(g: Mabn, t: int = 0,
                                    horizon: Optional[int] = None) -> ValueDependency:
    horizon = g.horizon if horizon is None else horizon
    if horizon > g.horizon or not 0 <= t <= horizon:
        raise ValueError(f"need 0 <= t <= T <= {g.horizon}, got t={t}, T={horizon}")
    sets = {}
    for i in range(1, g.n_agents + 1):
        targets = [MabnNode(OPTIMALITY, i, tau) for tau in range(t, horizon + 1)]
        anc = g.ancestors(targets, min_time=t)
        sets[i] = frozenset(v.agent for v in anc if v.kind in (STATE, ACTION)) | {i}
    return ValueDependency(sets, t, horizon)


def gradient_dependency(vd: ValueDependency) -> GradientDependency:
    edges = transpose_edges(vd.edges)
    sets = {i: {i} for i in vd.sets}
    for j, i in edges:
        sets[i].add(j)
    return GradientDependency({i: frozenset(s) for i, s in sets.items()}, edges)


def qhat_sets(vd: ValueDependency, gd: GradientDependency) -> dict[int, frozenset[int]]:
    if set(vd.sets) != set(gd.sets):
        raise ValueError("value and gradient dependency cover different agents")
    return {i: frozenset().union(*(vd.sets[j] for j in gd.sets[i])) for i in sorted(gd.sets)}


def kappa_dependency(folded: FoldedMabn, kappa: int) -> KappaDependency:
    sets = {}
    for i in range(1, folded.n_agents + 1):
        sets[i] = frozenset(v.agent for v in bounded_reach_sources(folded, i, kappa)) | {i}
    return KappaDependency(kappa, sets)


def saturation_kappa(folded: FoldedMabn, max_kappa: Optional[int] = None) -> KappaDependency:
    """Smallest kappa whose truncated sets stop changing."""
    max_kappa = folded.n_agents + 1 if max_kappa is None else max_kappa
    prev = kappa_dependency(folded, 0)
    for k in range(1, max_kappa + 1):
        cur = kappa_dependency(folded, k)
        if cur.sets == prev.sets:
            return prev
        prev = cur
    return prev


def strongly_connected_components(edges, n_agents: int) -> list[frozenset[int]]:
    g = nx.DiGraph()
    g.add_nodes_from(range(1, n_agents + 1))
    g.add_edges_from(edges)
    comps = [frozenset(c) for c in nx.strongly_connected_components(g)]
    return sorted(comps, key=min)


@dataclass(frozen=True)
class DependencyReport:
    vd: ValueDependency
    gd: GradientDependency
    qhat: dict[int, frozenset[int]]
    kappa: Optional[KappaDependency] = None

    def records(self) -> list[dict]:
        out = []
        for i in sorted(self.vd.sets):
            out.append({
                "agent": i,
                "I_Q": sorted(self.vd.sets[i]),
                "I_GD": sorted(self.gd.sets[i]),
                "I_Qhat": sorted(self.qhat[i]),
                "kappa": None if self.kappa is None else self.kappa.kappa,
                "I_Q_kappa": [] if self.kappa is None else sorted(self.kappa.sets[i]),
            })
        return out


def analyze(g: CouplingGraphs, kappa: Optional[int] = None,
            horizon: Optional[int] = None) -> DependencyReport:
    """Dependency sets for a static coupling triple (fixed point unless ``horizon`` is set)."""
    idx = derive_index_sets(g)
    vd = value_dependency(idx, 0, horizon)
    gd = gradient_dependency(vd)
    kd = None if kappa is None else kappa_dependency(build_folded(idx), kappa)
    return DependencyReport(vd, gd, qhat_sets(vd, gd), kd)
