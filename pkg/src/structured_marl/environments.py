"""Partially observable cooperative games: warehouse, thermal zones, tabular.

All models share one small interface (:class:`EnvModel`). Global states are
flat float vectors made of one block of coordinates per agent, so replay
buffers and critics can slice per-agent coordinates directly.

Randomness always comes from ``numpy.random.Generator`` seeded with
``numpy.random.default_rng(seed)`` (PCG64), recorded as :data:`RNG_NAME`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .coupling import CouplingGraphs, IndexSets, derive_index_sets, fixture

RNG_NAME = "numpy.random.PCG64"
ACTION_TOL = 1e-9


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _per_agent(value, n: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValueError(f"expected a scalar or {n} values, got shape {arr.shape}")
    return arr.copy()


class EnvModel:
    """Common interface. Subclasses set ``graphs`` and ``act_dims``."""

    graphs: CouplingGraphs
    act_dims: list[int]
    episode_length: int

    def _init_structure(self, graphs: CouplingGraphs, state_dims: Optional[Sequence[int]] = None):
        self.graphs = graphs
        self.idx: IndexSets = derive_index_sets(graphs)
        self.n_agents = graphs.n_agents
        self.state_dims = list(state_dims or [1] * self.n_agents)
        offsets = np.concatenate([[0], np.cumsum(self.state_dims)])
        self._coords = [np.arange(offsets[k], offsets[k + 1]) for k in range(self.n_agents)]
        # flat state coordinates observed by each agent
        self.obs_index = [self.coords(sorted(self.idx.i_o[i])) for i in graphs.agents]

    def coords(self, agents: Sequence[int]) -> np.ndarray:
        """Flat state coordinates of the given 1-based agents, in the given order."""
        if not len(agents):
            return np.zeros(0, dtype=int)
        return np.concatenate([self._coords[j - 1] for j in agents])

    @property
    def obs_dims(self) -> list[int]:
        return [len(ix) for ix in self.obs_index]

    @property
    def state_dim(self) -> int:
        return int(sum(self.state_dims))

    def state_vector(self, state) -> np.ndarray:
        raise NotImplementedError

    def observe(self, state) -> list[np.ndarray]:
        s = self.state_vector(state)
        return [s[ix] for ix in self.obs_index]

    def observe_batch(self, states: np.ndarray) -> list[np.ndarray]:
        return [states[:, ix] for ix in self.obs_index]

    def features(self, x: np.ndarray) -> np.ndarray:
        """Input preprocessing applied before any network sees state values."""
        return x

    def reset(self, rng: np.random.Generator):
        raise NotImplementedError

    def step(self, state, actions: Sequence[np.ndarray], rng: np.random.Generator):
        raise NotImplementedError


# ---------------------------------------------------------------- warehouse


@dataclass(frozen=True)
class WarehouseParams:
    m0: tuple = 1.0
    amplitude: tuple = 1.0
    omega: tuple = 1.0
    phi: float = 0.0
    noise_bound: float = 0.0
    episode_length: int = 8

    def arrays(self, n: int):
        return (_per_agent(self.m0, n), _per_agent(self.amplitude, n),
                _per_agent(self.omega, n))

    def check(self, n: int) -> list[str]:
        m0, amp, _ = self.arrays(n)
        bad = [i + 1 for i in range(n) if not 0 < abs(amp[i]) <= m0[i]]
        return [f"agent {i}: need 0 < |A_i| <= m_i(0)" for i in bad]


@dataclass(frozen=True)
class WarehouseState:
    """Stock m and the disturbance z that the next step will apply."""

    m: np.ndarray
    z: np.ndarray
    t: int = 0


def warehouse_topology(idx: IndexSets) -> tuple[list[list[int]], list[list[int]]]:
    """(out, in) neighbor lists per agent, 1-based, self excluded."""
    n = idx.n_agents
    outs = [idx.out_neighbors("i_s", i) for i in range(1, n + 1)]
    ins = [sorted(j for j in idx.i_s[i] if j != i) for i in range(1, n + 1)]
    return outs, ins


def warehouse_disturbance(params: WarehouseParams, n: int, t: int,
                          rng: Optional[np.random.Generator]) -> np.ndarray:
    _, amp, omega = params.arrays(n)
    z = amp * np.sin(omega * t + params.phi)
    if params.noise_bound > 0:
        z = z + rng.uniform(-params.noise_bound, params.noise_bound, size=n)
    return z


def warehouse_rewards(m: np.ndarray, idx: IndexSets) -> np.ndarray:
    shortage = np.where(m < 0, -m * m, 0.0)
    return np.array([shortage[np.array(sorted(idx.i_r[i])) - 1].sum()
                     for i in range(1, len(m) + 1)])


def warehouse_step(state: WarehouseState, actions: Sequence[np.ndarray], params: WarehouseParams,
                   idx: IndexSets, rng: Optional[np.random.Generator] = None,
                   z: Optional[np.ndarray] = None):
    """One transfer step. ``actions[i-1][k]`` is the fraction sent to the k-th out-neighbor.

    A trailing retained-stock slot is allowed and ignored. Rewards use the
    pre-step stock. The step applies ``state.z`` (or ``z`` when given) and
    draws the disturbance for the following step.
    """
    m = np.asarray(state.m, dtype=float)
    n = len(m)
    outs, ins = warehouse_topology(idx)
    sent = []
    for i in range(n):
        b = np.asarray(actions[i], dtype=float)
        if len(b) not in (len(outs[i]), len(outs[i]) + 1):
            raise ValueError(f"agent {i + 1}: action length {len(b)} does not match "
                             f"{len(outs[i])} out-neighbors")
        b = b[:len(outs[i])]
        if np.any(b < -ACTION_TOL) or np.any(b > 1 + ACTION_TOL) or b.sum() > 1 + ACTION_TOL:
            raise ValueError(f"agent {i + 1}: fractions {b.tolist()} leave [0, 1] or sum above 1")
        sent.append(b)
    alpha = (m >= 0).astype(float)
    m_new = m.copy()
    for i in range(n):
        for k, j in enumerate(outs[i]):
            flow = alpha[i] * sent[i][k] * m[i]
            m_new[i] -= flow
            m_new[j - 1] += flow
    m_new = m_new + (state.z if z is None else z)
    z_next = warehouse_disturbance(params, n, state.t + 1, rng)
    return WarehouseState(m_new, z_next, state.t + 1), warehouse_rewards(m, idx)


class Warehouse(EnvModel):
    """Each agent holds (m_i, z_i) and observes m over I_O^i plus its own z_i."""

    def __init__(self, graphs: CouplingGraphs, params: WarehouseParams = WarehouseParams()):
        self._init_structure(graphs, [2] * graphs.n_agents)
        self.obs_index = [np.concatenate([2 * (np.array(sorted(self.idx.i_o[i])) - 1), [2 * i - 1]])
                          for i in graphs.agents]
        self.params = params
        self.episode_length = params.episode_length
        self.outs, self.ins = warehouse_topology(self.idx)
        # softmax head: one slot per out-neighbor plus retained stock
        self.act_dims = [len(o) + 1 for o in self.outs]
        self.action_kind = "simplex"

    def reset(self, rng):
        m0, _, _ = self.params.arrays(self.n_agents)
        return WarehouseState(m0, warehouse_disturbance(self.params, self.n_agents, 0, rng), 0)

    def state_vector(self, state):
        return np.column_stack([state.m, state.z]).reshape(-1)

    def step(self, state, actions, rng):
        return warehouse_step(state, actions, self.params, self.idx, rng)


# ---------------------------------------------------------------- thermal


@dataclass(frozen=True)
class ThermalParams:
    delta: float = 60.0
    nu: float = 200.0
    zeta: float = 1.0
    zeta_ij: float = 1.0
    pi: float = 1.0
    eps0: float = 30.0
    x_star: float = 22.0
    beta: float = 0.01
    noise_std: Optional[float] = None
    u_max: float = 15.0
    episode_length: int = 40
    x0_mean: float = 30.0
    x0_var: float = 2.5

    def __post_init__(self):
        if self.delta < 0 or self.nu <= 0 or self.zeta <= 0:
            raise ValueError("need delta >= 0, nu > 0, zeta > 0")

    @property
    def sigma(self) -> float:
        if self.noise_std is not None:
            return self.noise_std
        return math.sqrt(self.delta * 6.25) / self.nu


@dataclass(frozen=True)
class ThermalState:
    x: np.ndarray
    t: int = 0


def thermal_step(state: ThermalState, u: Sequence[float], params: ThermalParams, idx: IndexSets,
                 rng: Optional[np.random.Generator] = None, w: Optional[np.ndarray] = None):
    x = np.asarray(state.x, dtype=float)
    n = len(x)
    u = np.asarray(u, dtype=float).reshape(n)
    if np.any(np.abs(u) > params.u_max + 1e-12):
        raise ValueError(f"control input outside +-{params.u_max}")
    p = params
    a = p.delta / (p.nu * p.zeta)
    coupling = np.zeros(n)
    for i in range(1, n + 1):
        for j in idx.i_s[i]:
            if j != i:
                coupling[i - 1] += (x[j - 1] - x[i - 1]) * p.delta / (p.nu * p.zeta_ij)
    if w is None:
        w = rng.standard_normal(n) if rng is not None else np.zeros(n)
    x_new = ((1 - a) * x + (p.delta / p.nu) * u + coupling + a * p.eps0
             + (p.delta / p.nu) * p.pi + p.sigma * w)
    rewards = -(x - p.x_star) ** 2 - p.beta * u ** 2
    return ThermalState(x_new, state.t + 1), rewards


class Thermal(EnvModel):
    def __init__(self, graphs: CouplingGraphs, params: ThermalParams = ThermalParams()):
        self._init_structure(graphs)
        self.params = params
        self.episode_length = params.episode_length
        self.act_dims = [1] * self.n_agents
        self.action_kind = "box"

    def reset(self, rng):
        p = self.params
        return ThermalState(p.x0_mean + math.sqrt(p.x0_var) * rng.standard_normal(self.n_agents))

    def state_vector(self, state):
        return np.asarray(state.x, dtype=float)

    def features(self, x):
        return x - self.params.x_star

    def step(self, state, actions, rng):
        u = np.array([float(np.asarray(a).reshape(-1)[0]) for a in actions])
        return thermal_step(state, u, self.params, self.idx, rng)


# ---------------------------------------------------------------- tabular


def tabular_enumerate(poscg: "TabularPoscg", cap: int = 10 ** 7) -> Iterator[tuple[tuple, tuple]]:
    total = poscg.n_joint_states * poscg.n_joint_actions
    if total > cap:
        raise ValueError(f"{total} state-action pairs exceed the cap of {cap}")
    states = list(itertools.product(*(range(k) for k in poscg.n_states)))
    actions = list(itertools.product(*(range(k) for k in poscg.n_actions)))
    for s in states:
        for a in actions:
            yield s, a


@dataclass
class TabularPoscg(EnvModel):
    """Finite game with factored local tables.

    ``trans[i]`` has axes (s_j for j in I_S^i, a_j for j in I_S^i, s_i') and
    ``reward[i]`` has axes (s_j for j in I_R^i, a_j for j in I_R^i), both in
    ascending agent order. Agent i observes the tuple of s_j over I_O^i.
    """

    graphs: CouplingGraphs
    n_states: tuple
    n_actions: tuple
    trans: Mapping[int, np.ndarray]
    reward: Mapping[int, np.ndarray]
    init: Optional[np.ndarray] = None
    horizon: Optional[int] = None
    episode_length: int = 1

    def __post_init__(self):
        self._init_structure(self.graphs)
        n = self.n_agents
        self.n_states = tuple(int(k) for k in _per_agent(self.n_states, n))
        self.n_actions = tuple(int(k) for k in _per_agent(self.n_actions, n))
        self.act_dims = [1] * n
        if self.init is None:
            self.init = np.full(self.n_joint_states, 1.0 / self.n_joint_states)
        for i, p in self.trans.items():
            if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0):
                raise ValueError(f"agent {i}: transition rows do not sum to 1")

    @property
    def n_joint_states(self) -> int:
        return int(np.prod(self.n_states))

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.n_actions))

    def n_obs(self, i: int) -> int:
        return int(np.prod([self.n_states[j - 1] for j in sorted(self.idx.i_o[i])]))

    def obs_of(self, i: int, s: Sequence[int]) -> int:
        members = sorted(self.idx.i_o[i])
        return int(np.ravel_multi_index([s[j - 1] for j in members],
                                        [self.n_states[j - 1] for j in members]))

    def obs_table(self) -> np.ndarray:
        """(n_agents, S) integer observation index of every global state."""
        states = np.array(list(itertools.product(*(range(k) for k in self.n_states))))
        return np.array([[self.obs_of(i, s) for s in states] for i in self.graphs.agents])

    def _broadcast(self, local: np.ndarray, members: Sequence[int], next_of: Optional[int]):
        n = self.n_agents
        shape = [1] * (3 * n if next_of is not None else 2 * n)
        for j in members:
            shape[j - 1] = self.n_states[j - 1]
            shape[n + j - 1] = self.n_actions[j - 1]
        if next_of is not None:
            shape[2 * n + next_of - 1] = self.n_states[next_of - 1]
        return local.reshape(shape)

    def joint_transition(self) -> np.ndarray:
        """P[s, a, s'] over flattened joint indices."""
        n = self.n_agents
        full = np.ones(self.n_states + self.n_actions + self.n_states)
        for i in self.graphs.agents:
            full = full * self._broadcast(self.trans[i], sorted(self.idx.i_s[i]), i)
        S, A = self.n_joint_states, self.n_joint_actions
        return full.reshape(S, A, S)

    def joint_rewards(self) -> np.ndarray:
        """R[i-1, s, a]."""
        out = []
        for i in self.graphs.agents:
            r = self._broadcast(self.reward[i], sorted(self.idx.i_r[i]), None)
            out.append(np.broadcast_to(r, self.n_states + self.n_actions)
                       .reshape(self.n_joint_states, self.n_joint_actions))
        return np.array(out)

    def local_reward(self, i: int, s: Sequence[int], a: Sequence[int]) -> float:
        m = sorted(self.idx.i_r[i])
        return float(self.reward[i][tuple(s[j - 1] for j in m) + tuple(a[j - 1] for j in m)])

    def next_state_dist(self, i: int, s: Sequence[int], a: Sequence[int]) -> np.ndarray:
        m = sorted(self.idx.i_s[i])
        return self.trans[i][tuple(s[j - 1] for j in m) + tuple(a[j - 1] for j in m)]

    def reset(self, rng):
        k = rng.choice(self.n_joint_states, p=self.init)
        return np.array(np.unravel_index(k, self.n_states))

    def state_vector(self, state):
        return np.asarray(state, dtype=float)

    def step(self, state, actions, rng):
        s = [int(v) for v in state]
        a = [int(np.asarray(x).reshape(-1)[0]) for x in actions]
        rewards = np.array([self.local_reward(i, s, a) for i in self.graphs.agents])
        nxt = [int(rng.choice(self.n_states[i - 1], p=self.next_state_dist(i, s, a)))
               for i in self.graphs.agents]
        return np.array(nxt), rewards


def random_tabular(graphs: CouplingGraphs, rng: np.random.Generator, n_states=2, n_actions=2,
                   reward_scale: float = 1.0, horizon: Optional[int] = None) -> TabularPoscg:
    idx = derive_index_sets(graphs)
    n = graphs.n_agents
    ns = _per_agent(n_states, n).astype(int)
    na = _per_agent(n_actions, n).astype(int)
    trans, reward = {}, {}
    for i in graphs.agents:
        m = sorted(idx.i_s[i])
        shape = [ns[j - 1] for j in m] + [na[j - 1] for j in m] + [ns[i - 1]]
        p = rng.uniform(0.1, 1.0, size=shape)
        trans[i] = p / p.sum(axis=-1, keepdims=True)
        m = sorted(idx.i_r[i])
        reward[i] = reward_scale * rng.standard_normal([ns[j - 1] for j in m] + [na[j - 1] for j in m])
    return TabularPoscg(graphs, tuple(ns), tuple(na), trans, reward, horizon=horizon)


# ---------------------------------------------------------------- builtins

BUILTINS = ("warehouse9", "warehouse40", "thermal40")


def _warehouse9_params() -> WarehouseParams:
    amp = tuple(1.0 if i in (2, 3, 5, 7) else -1.0 for i in range(1, 10))
    return WarehouseParams(m0=1.0, amplitude=amp, omega=1.0, phi=0.0, episode_length=8)


def _override(obj, overrides: Optional[Mapping]):
    if not overrides:
        return obj
    names = {f.name for f in fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise KeyError(f"unknown fields for {type(obj).__name__}: {sorted(unknown)}")
    return replace(obj, **{k: tuple(v) if isinstance(v, list) else v
                           for k, v in overrides.items()})


def builtin_config(name: str, env_overrides: Optional[Mapping] = None,
                   train_overrides: Optional[Mapping] = None):
    """(graphs, env, TrainConfig) for one of the paper-style experiments."""
    from .mastac import TrainConfig

    if name == "warehouse9":
        graphs = fixture("warehouse9")
        env = Warehouse(graphs, _override(_warehouse9_params(), env_overrides))
        cfg = TrainConfig(epochs=3500, batch_size=256, gamma=0.95, actor_lr=1e-4,
                          critic_lr=1e-3, episode_length=8)
    elif name == "warehouse40":
        graphs = fixture("warehouse40")
        amp = tuple(1.0 if i % 2 else -1.0 for i in range(1, 41))
        params = WarehouseParams(m0=1.0, amplitude=amp, episode_length=8)
        env = Warehouse(graphs, _override(params, env_overrides))
        cfg = TrainConfig(epochs=6000, batch_size=256, gamma=0.95, actor_lr=5e-4,
                          critic_lr=5e-3, episode_length=8)
    elif name == "thermal40":
        graphs = fixture("thermal40")
        env = Thermal(graphs, _override(ThermalParams(), env_overrides))
        cfg = TrainConfig(epochs=5000, batch_size=256, gamma=0.9, actor_lr=1e-4,
                          critic_lr=1e-3, episode_length=40, actor_hidden=())
    else:
        raise KeyError(f"unknown builtin {name!r}; choose from {BUILTINS}")
    cfg = _override(cfg, train_overrides)
    return graphs, env, cfg
