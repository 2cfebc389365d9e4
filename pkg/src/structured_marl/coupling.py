"""Coupling graphs between agents and the per-agent index sets derived from them.

Agent ids are 1-based everywhere in this package. An edge ``(j, i)`` means
agent ``j`` influences agent ``i`` (source first).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

Edge = tuple[int, int]

FIXTURES = ("six_agent", "warehouse9", "warehouse40", "thermal40")


class GraphValidationError(ValueError):
    pass


def _as_edges(raw: Iterable[Sequence[int]]) -> frozenset[Edge]:
    return frozenset((int(j), int(i)) for j, i in raw)


@dataclass(frozen=True)
class CouplingGraphs:
    """State, observation and reward coupling over ``n_agents`` agents."""

    n_agents: int
    edges_state: frozenset[Edge] = field(default_factory=frozenset)
    edges_obs: frozenset[Edge] = field(default_factory=frozenset)
    edges_reward: frozenset[Edge] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "edges_state", _as_edges(self.edges_state))
        object.__setattr__(self, "edges_obs", _as_edges(self.edges_obs))
        object.__setattr__(self, "edges_reward", _as_edges(self.edges_reward))
        if self.n_agents < 1:
            raise GraphValidationError(f"n_agents must be positive, got {self.n_agents}")
        for name, edges in self._named_edges():
            for e in sorted(edges):
                if not all(1 <= v <= self.n_agents for v in e):
                    raise GraphValidationError(
                        f"{name} edge {e} has an endpoint outside 1..{self.n_agents}"
                    )

    def _named_edges(self):
        return (("state", self.edges_state), ("obs", self.edges_obs),
                ("reward", self.edges_reward))

    @property
    def agents(self) -> range:
        return range(1, self.n_agents + 1)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "state": [list(e) for e in sorted(self.edges_state)],
            "obs": [list(e) for e in sorted(self.edges_obs)],
            "reward": [list(e) for e in sorted(self.edges_reward)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CouplingGraphs":
        report = validate(d)
        if report:
            raise GraphValidationError("; ".join(report))
        return cls(int(d["n_agents"]), d.get("state", ()), d.get("obs", ()),
                   d.get("reward", ()))


@dataclass(frozen=True)
class IndexSets:
    """I_S, I_O, I_R per agent; each set contains the agent itself."""

    i_s: Mapping[int, frozenset[int]]
    i_o: Mapping[int, frozenset[int]]
    i_r: Mapping[int, frozenset[int]]

    @property
    def n_agents(self) -> int:
        return len(self.i_s)

    def to_dict(self) -> dict:
        return {name: {str(i): sorted(s) for i, s in sorted(getattr(self, name).items())}
                for name in ("i_s", "i_o", "i_r")}

    def out_neighbors(self, kind: str, j: int) -> list[int]:
        """Agents i != j whose ``kind`` set contains j, ascending."""
        sets = getattr(self, kind)
        return [i for i in sorted(sets) if i != j and j in sets[i]]


# one IndexSets per time step 0..T
TimeVaryingIndexSets = tuple[IndexSets, ...]


def _in_sets(n: int, edges: Iterable[Edge]) -> dict[int, frozenset[int]]:
    sets = {i: {i} for i in range(1, n + 1)}
    for j, i in edges:
        sets[i].add(j)
    return {i: frozenset(s) for i, s in sets.items()}


def derive_index_sets(g: CouplingGraphs) -> IndexSets:
    n = g.n_agents
    return IndexSets(_in_sets(n, g.edges_state), _in_sets(n, g.edges_obs),
                     _in_sets(n, g.edges_reward))


def time_invariant(idx: IndexSets, horizon: int) -> TimeVaryingIndexSets:
    return tuple(idx for _ in range(horizon + 1))


def transpose_edges(edges: Iterable[Edge]) -> frozenset[Edge]:
    return frozenset((i, j) for j, i in edges)


def validate(g) -> list[str]:
    """Findings for a graph dict (as read from JSON) or a CouplingGraphs.

    An empty list means the graphs are valid.
    """
    if isinstance(g, CouplingGraphs):
        g = g.to_dict()
    findings = []
    n = g.get("n_agents")
    if not isinstance(n, int) or n < 1:
        return [f"n_agents must be a positive integer, got {n!r}"]
    for name in ("state", "obs", "reward"):
        seen = set()
        for e in g.get(name, ()):
            if len(e) != 2:
                findings.append(f"{name} edge {list(e)} is not a pair")
                continue
            e = (int(e[0]), int(e[1]))
            if not (1 <= e[0] <= n and 1 <= e[1] <= n):
                findings.append(f"{name} edge {e} has an endpoint outside 1..{n}")
            if e in seen:
                findings.append(f"{name} edge {e} is duplicated")
            seen.add(e)
    return findings


def random_graphs(n_agents: int, rng, density: float = 0.3) -> CouplingGraphs:
    """Independent Bernoulli(density) edges in each graph, self-loops left implicit."""
    pairs = [(j, i) for j in range(1, n_agents + 1) for i in range(1, n_agents + 1) if j != i]
    draw = lambda: frozenset(e for e in pairs if rng.random() < density)
    return CouplingGraphs(n_agents, draw(), draw(), draw())


def load_graphs(path: str | Path) -> CouplingGraphs:
    with open(path) as f:
        return CouplingGraphs.from_dict(json.load(f))


def dump_graphs(g: CouplingGraphs, path: str | Path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1) + "\n")


def fixture(name: str) -> CouplingGraphs:
    """One of the bundled graph files: six_agent, warehouse9, warehouse40, thermal40."""
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    text = resources.files("structured_marl.data").joinpath(f"{name}.json").read_text()
    return CouplingGraphs.from_dict(json.loads(text))


def graphs_from_arg(arg: str) -> CouplingGraphs:
    """Accept either a bundled fixture name or a path to a graph file."""
    if arg in FIXTURES:
        return fixture(arg)
    return load_graphs(arg)
