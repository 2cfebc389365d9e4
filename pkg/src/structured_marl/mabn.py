"""Multi-agent Bayesian network over state, action and optimality variables.

The full network is a layered DAG over times 0..T. The folded network keeps
two layers and replaces every self state edge s_i(0) -> s_i(1) with a flagged
bidirectional edge. Walking that edge from layer 1 back to layer 0 re-enters
the same structure one step later, so each such fold is one extra time step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .coupling import IndexSets, TimeVaryingIndexSets, time_invariant

STATE, ACTION, OPTIMALITY = "s", "a", "Z"


class MabnNode(NamedTuple):
    kind: str
    agent: int
    time: int

    def label(self) -> str:
        return f"{self.kind}_{self.agent}@{self.time}"


Arc = tuple[MabnNode, MabnNode]


def _layer_arcs(idx: IndexSets, t: int) -> Iterable[Arc]:
    """Observation and reward arcs inside one time layer."""
    for i in sorted(idx.i_o):
        for j in sorted(idx.i_o[i]):
            yield MabnNode(STATE, j, t), MabnNode(ACTION, i, t)
    for i in sorted(idx.i_r):
        z = MabnNode(OPTIMALITY, i, t)
        for j in sorted(idx.i_r[i]):
            yield MabnNode(STATE, j, t), z
            yield MabnNode(ACTION, j, t), z


def _dynamics_arcs(idx_next: IndexSets, t: int) -> Iterable[Arc]:
    """Arcs from layer t into the states of layer t+1."""
    for i in sorted(idx_next.i_s):
        nxt = MabnNode(STATE, i, t + 1)
        for j in sorted(idx_next.i_s[i]):
            yield MabnNode(STATE, j, t), nxt
            yield MabnNode(ACTION, j, t), nxt


class _Graph:
    def __init__(self, nodes: Sequence[MabnNode], arcs: Iterable[Arc]):
        self.nodes = tuple(nodes)
        self.successors = {v: set() for v in self.nodes}
        self.predecessors = {v: set() for v in self.nodes}
        for u, v in arcs:
            self.successors[u].add(v)
            self.predecessors[v].add(u)

    @property
    def arcs(self) -> frozenset[Arc]:
        return frozenset((u, v) for u, vs in self.successors.items() for v in vs)

    def _check(self, v: MabnNode):
        if v not in self.successors:
            raise KeyError(f"unknown node {v.label()}")


def _nodes(n: int, times: Iterable[int]) -> list[MabnNode]:
    return [MabnNode(k, i, t) for t in times for i in range(1, n + 1)
            for k in (STATE, ACTION, OPTIMALITY)]


class Mabn(_Graph):
    """Full finite-horizon network. Build with :func:`build_full`."""

    def __init__(self, n_agents: int, horizon: int, arcs: Iterable[Arc]):
        super().__init__(_nodes(n_agents, range(horizon + 1)), arcs)
        self.n_agents = n_agents
        self.horizon = horizon

    def ancestors(self, targets: Iterable[MabnNode], min_time: int = 0) -> set[MabnNode]:
        """All nodes with a path into ``targets`` (targets included), ignoring time < min_time."""
        seen = set(targets)
        queue = deque(seen)
        while queue:
            v = queue.popleft()
            for u in self.predecessors[v]:
                if u.time >= min_time and u not in seen:
                    seen.add(u)
                    queue.append(u)
        return seen

    def is_acyclic(self) -> bool:
        indeg = {v: len(p) for v, p in self.predecessors.items()}
        queue = deque(v for v, d in indeg.items() if d == 0)
        count = 0
        while queue:
            v = queue.popleft()
            count += 1
            for w in self.successors[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    queue.append(w)
        return count == len(self.nodes)


def build_full(idx: TimeVaryingIndexSets | IndexSets, horizon: int) -> Mabn:
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if isinstance(idx, IndexSets):
        idx = time_invariant(idx, horizon)
    if len(idx) != horizon + 1:
        raise ValueError(f"index sets cover {len(idx)} steps but horizon {horizon} needs "
                         f"{horizon + 1}")
    arcs = []
    for t in range(horizon + 1):
        arcs.extend(_layer_arcs(idx[t], t))
        if t < horizon:
            arcs.extend(_dynamics_arcs(idx[t + 1], t))
    return Mabn(idx[0].n_agents, horizon, arcs)


def reaches(g: _Graph, source: MabnNode, target: MabnNode) -> bool:
    g._check(source)
    g._check(target)
    seen = {source}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        if v == target:
            return True
        for w in g.successors[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return False


class FoldedMabn(_Graph):
    """Two-layer folded network.

    ``arcs`` holds the ordinary directed arcs; the self state arcs live only in
    ``bidirectional`` (one agent id per s_i(0) <-> s_i(1) pair).
    """

    def __init__(self, idx: IndexSets):
        arcs = list(_layer_arcs(idx, 0)) + list(_layer_arcs(idx, 1))
        arcs += [(u, v) for u, v in _dynamics_arcs(idx, 0)
                 if not (u.kind == STATE and u.agent == v.agent)]
        super().__init__(_nodes(idx.n_agents, (0, 1)), arcs)
        self.n_agents = idx.n_agents
        self.index_sets = idx
        self.bidirectional = frozenset(i for i in idx.i_s)

    def unfold(self, horizon: int) -> Mabn:
        """Re-time the two layers into a full network of the given horizon."""
        out = []
        for t in range(horizon + 1):
            for u, v in self.arcs:
                if u.time == v.time == 0:
                    out.append((u._replace(time=t), v._replace(time=t)))
                elif t < horizon and u.time == 0 and v.time == 1:
                    out.append((u._replace(time=t), v._replace(time=t + 1)))
            if t < horizon:
                out += [(MabnNode(STATE, i, t), MabnNode(STATE, i, t + 1))
                        for i in self.bidirectional]
        return Mabn(self.n_agents, horizon, out)


def build_folded(idx: IndexSets) -> FoldedMabn:
    return FoldedMabn(idx)


def bounded_reach_sources(g: FoldedMabn, target_agent: int, kappa: int) -> set[MabnNode]:
    """First-layer state/action nodes that reach Z_target within ``kappa`` folds.

    A fold is a traversal of a bidirectional edge from layer 1 back to layer 0.
    The search state is (node, shift) with real time = shift + layer; the
    result matches reachability on ``build_full`` with horizon ``kappa + 1``.
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    start = [(MabnNode(OPTIMALITY, target_agent, layer), shift)
             for layer in (0, 1) for shift in range(kappa + 1)]
    seen = set(start)
    queue = deque(start)
    found = set()
    while queue:
        v, shift = queue.popleft()
        if v.time == 0 and shift == 0 and v.kind != OPTIMALITY:
            found.add(v)
        steps = [(u, shift) for u in g.predecessors[v]]
        if v.kind == STATE and v.agent in g.bidirectional:
            if v.time == 1:
                # forward self edge s_i(0) -> s_i(1), walked in reverse
                steps.append((v._replace(time=0), shift))
            elif shift > 0:
                # undo a fold: s_i(0) at shift k came from s_i(1) at shift k-1
                steps.append((v._replace(time=1), shift - 1))
        for w in steps:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return found


def to_dot(g: _Graph, name: str = "mabn") -> str:
    lines = [f"digraph {name} {{"]
    for v in g.nodes:
        lines.append(f'  "{v.label()}";')
    for u, v in sorted(g.arcs):
        lines.append(f'  "{u.label()}" -> "{v.label()}";')
    if isinstance(g, FoldedMabn):
        for i in sorted(g.bidirectional):
            lines.append(f'  "s_{i}@0" -> "s_{i}@1" [dir=both, penwidth=2];')
    lines.append("}")
    return "\n".join(lines) + "\n"
