"""Structured multi-agent actor-critic (deterministic policies, off-policy).

Each agent owns an actor on its observation and a critic on the states and
actions of its value-dependency set. The actor of agent i follows the summed
action gradient of the critics in its gradient-dependency set. All agents
update together from the same pre-update snapshot, then targets are mixed in.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .coupling import CouplingGraphs, derive_index_sets
from .dependency import (GradientDependency, ValueDependency, gradient_dependency,
                         kappa_dependency, value_dependency)
from .environments import EnvModel
from .mabn import build_folded
from .neural import (Mlp, OptimState, backward, backward_to_preactivation, first_preactivation,
                     forward, forward_cache, forward_from_preactivation, has_nan, init_glorot,
                     optim_step, soft_update)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3500
    batch_size: int = 256
    tau: float = 0.01
    gamma: float = 0.95
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    episode_length: int = 8
    update_interval: int = 1
    warmup: Optional[int] = None
    sigma_start: float = 0.3
    sigma_end: float = 0.05
    sigma_decay_fraction: float = 0.5
    variant: str = "exact"
    seeds: tuple = (0,)
    hidden: tuple = (64, 64, 64)
    actor_hidden: tuple = (64, 64, 64)
    replay_capacity: int = 10 ** 6
    literal_gamma: bool = False
    smooth_window: int = 100
    reward_bound: float = 1e6

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch_size < 1 or self.update_interval < 1:
            raise ValueError("batch_size and update_interval must be >= 1")
        parse_variant(self.variant)

    @property
    def warmup_steps(self) -> int:
        return self.batch_size if self.warmup is None else max(self.warmup, self.batch_size)

    def sigma(self, epoch: int) -> float:
        span = self.sigma_decay_fraction * self.epochs
        if span <= 0 or epoch >= span:
            return self.sigma_end
        return self.sigma_start + (self.sigma_end - self.sigma_start) * epoch / span

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["hidden"] = list(self.hidden)
        d["actor_hidden"] = list(self.actor_hidden)
        return d


@dataclass(frozen=True)
class Variant:
    kind: str
    kappa: Optional[int] = None

    def __str__(self):
        return f"kappa:{self.kappa}" if self.kind == "kappa" else self.kind


def parse_variant(text) -> Variant:
    if isinstance(text, Variant):
        return text
    t = str(text).strip().lower()
    if t in ("exact", "undecq", "undecqhat"):
        return Variant(t)
    if t.startswith("kappa:"):
        k = int(t.split(":", 1)[1])
        if k < 0:
            raise ValueError("kappa must be >= 0")
        return Variant("kappa", k)
    raise ValueError(f"unknown variant {text!r}; use exact, kappa:K, undecq or undecqhat")


@dataclass(frozen=True)
class StructuredSets:
    """What each learner reads: critic inputs, actor peers, and summed rewards."""

    i_q: dict
    i_gd: dict
    peers: dict
    reward_sets: dict


def variant_dependency(variant, graphs: CouplingGraphs) -> StructuredSets:
    v = parse_variant(variant)
    idx = derive_index_sets(graphs)
    everyone = frozenset(graphs.agents)
    vd = value_dependency(idx)
    gd = gradient_dependency(vd)
    own = {i: frozenset({i}) for i in graphs.agents}
    if v.kind == "exact":
        return StructuredSets(dict(vd.sets), dict(gd.sets), dict(gd.sets), own)
    if v.kind == "kappa":
        kd = kappa_dependency(build_folded(idx), v.kappa)
        kgd = gradient_dependency(kd.as_value_dependency())
        return StructuredSets(dict(kd.sets), dict(kgd.sets), dict(kgd.sets), own)
    if v.kind == "undecq":
        return StructuredSets({i: everyone for i in graphs.agents}, dict(gd.sets),
                              dict(gd.sets), own)
    # undecqhat: one global critic per agent learning the summed GD-set reward
    return StructuredSets({i: everyone for i in graphs.agents}, dict(gd.sets), own,
                          dict(gd.sets))


class SharedReplay:
    """Ring buffer of global transitions (s, a, r, s')."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, n_agents: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.r = np.zeros((self.capacity, n_agents))
        self.s2 = np.zeros((self.capacity, state_dim))
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2):
        k = self.cursor
        self.s[k], self.a[k], self.r[k], self.s2[k] = s, a, r, s2
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < m:
            raise ValueError(f"buffer holds {self.size} transitions, need {m}")
        return rng.choice(self.size, size=m, replace=False)

    def batch(self, ix: np.ndarray):
        return self.s[ix], self.a[ix], self.r[ix], self.s2[ix]


class AgentLearner:
    def __init__(self, agent: int, env: EnvModel, sets: StructuredSets, cfg: TrainConfig,
                 rng: np.random.Generator, a_offsets: np.ndarray):
        self.agent = agent
        self.i_q = sorted(sets.i_q[agent])
        self.i_gd = sorted(sets.i_gd[agent])
        self.peers = sorted(sets.peers[agent])
        self.reward_set = np.array(sorted(sets.reward_sets[agent])) - 1
        self.obs_index = env.obs_index[agent - 1]
        self.s_index = env.coords(self.i_q)
        self.a_index = np.concatenate([np.arange(a_offsets[j - 1], a_offsets[j])
                                       for j in self.i_q])
        # column range of each member's action inside the critic input
        self.slots = {}
        start = len(self.s_index)
        for j in self.i_q:
            self.slots[j] = slice(start, start + env.act_dims[j - 1])
            start += env.act_dims[j - 1]
        simplex = getattr(env, "action_kind", "box") == "simplex"
        head = "softmax" if simplex else "tanh"
        u_max = getattr(getattr(env, "params", None), "u_max", 1.0)
        self.simplex = simplex
        self.actor = init_glorot([len(self.obs_index), *cfg.actor_hidden,
                                  env.act_dims[agent - 1]], head, rng, u_max=u_max)
        self.critic = init_glorot([len(self.s_index) + len(self.a_index), *cfg.hidden, 1],
                                  "linear", rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = OptimState.for_net(self.actor, cfg.actor_lr)
        self.critic_opt = OptimState.for_net(self.critic, cfg.critic_lr)

    def critic_input(self, feat_s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.concatenate([feat_s[:, self.s_index], a[:, self.a_index]], axis=1)

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "target_actor": self.target_actor,
                "target_critic": self.target_critic}


def project_action(a: np.ndarray, simplex: bool, u_max: float) -> np.ndarray:
    if simplex:
        a = np.clip(a, 0.0, None)
        total = a.sum()
        return a / total if total > 0 else np.full(len(a), 1.0 / len(a))
    return np.clip(a, -u_max, u_max)


def act_explore(learner: AgentLearner, o_i: np.ndarray, sigma: float,
                rng: np.random.Generator) -> np.ndarray:
    mu = forward(learner.actor, o_i)
    # the draw happens even at sigma = 0 so the stream does not depend on the schedule
    eps = rng.standard_normal(mu.shape)
    if sigma == 0:
        return mu
    return project_action(mu + sigma * eps, learner.simplex, learner.actor.u_max)


def sample_projection(buffer: SharedReplay, learner: AgentLearner, m: int,
                      rng: np.random.Generator, env: EnvModel) -> dict:
    """Draw a minibatch and keep only the coordinates agent ``learner`` may read."""
    s, a, r, s2 = buffer.batch(buffer.sample_indices(m, rng))
    return {
        "o": s[:, learner.obs_index],
        "s": s[:, learner.s_index],
        "a": a[:, learner.a_index],
        "r": r[:, learner.reward_set].sum(axis=1),
        "s2": s2[:, learner.s_index],
        "o2": {j: s2[:, env.obs_index[j - 1]] for j in learner.i_q},
    }


def td_target(r: np.ndarray, gamma: float, q_next: np.ndarray, literal: bool = False) -> np.ndarray:
    """y = r + gamma * Q'; the literal variant leaves gamma out of the target."""
    return r + (1.0 if literal else gamma) * q_next


def critic_grads(learner: AgentLearner, x: np.ndarray, y: np.ndarray, gamma: float = 1.0,
                 literal: bool = False):
    """Gradient of mean((y - c * Q(x))^2) with c = gamma in literal mode, else 1."""
    c = gamma if literal else 1.0
    cache = forward_cache(learner.critic, x)
    q = cache[0][:, 0]
    resid = y - c * q
    up = (-2.0 * c * resid / len(y))[:, None]
    return backward(learner.critic, x, up, cache), float(np.mean(resid ** 2))


def critic_update(learner: AgentLearner, x: np.ndarray, y: np.ndarray, **kw) -> float:
    grads, loss = critic_grads(learner, x, y, **kw)
    optim_step(learner.critic_opt, learner.critic, grads)
    return loss


def actor_grads(learner: AgentLearner, peers: Sequence[AgentLearner], o_i: np.ndarray,
                peer_inputs: Sequence[np.ndarray]):
    """Gradient of -mean(sum_j Q_j) with agent i's action set to its current policy.

    ``peer_inputs[k]`` is the critic input of ``peers[k]`` on the minibatch; the
    slot of agent i's action is overwritten with pi_i(o_i).
    """
    cache = forward_cache(learner.actor, o_i)
    mu = cache[0]
    m = len(o_i)
    dmu = np.zeros_like(mu)
    for peer, x in zip(peers, peer_inputs):
        if learner.agent not in peer.slots:
            raise KeyError(f"agent {learner.agent} is not in the value-dependency set of "
                           f"agent {peer.agent}")
        sl = peer.slots[learner.agent]
        x = x.copy()
        x[:, sl] = mu
        g = backward(peer.critic, x, np.full((m, 1), -1.0 / m))
        dmu += g.input[:, sl]
    return backward(learner.actor, o_i, dmu, cache)


def actor_update(learner, peers, o_i, peer_inputs):
    optim_step(learner.actor_opt, learner.actor, actor_grads(learner, peers, o_i, peer_inputs))


@dataclass
class RunRecord:
    seed: int
    variant: str
    step_reward: list = field(default_factory=list)
    episode_return: list = field(default_factory=list)
    smoothed_return: list = field(default_factory=list)
    max_abs_reward: float = 0.0
    wall_clock: float = 0.0
    failed: bool = False
    error: str = ""

    def episode_means(self, episode_length: int) -> np.ndarray:
        """Per-step team reward averaged over each completed episode."""
        k = len(self.step_reward) // episode_length
        return np.asarray(self.step_reward[:k * episode_length]).reshape(k, episode_length).mean(1)


class Trainer:
    def __init__(self, cfg: TrainConfig, env: EnvModel, graphs: Optional[CouplingGraphs] = None,
                 seed: int = 0):
        self.cfg = cfg
        self.env = env
        self.graphs = graphs or env.graphs
        self.seed = seed
        self.variant = parse_variant(cfg.variant)
        init_ss, self._env_ss, self._noise_ss, self._sample_ss = \
            np.random.SeedSequence(seed).spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.sets = variant_dependency(self.variant, self.graphs)
        self.a_offsets = np.concatenate([[0], np.cumsum(env.act_dims)]).astype(int)
        self.learners = [AgentLearner(i, env, self.sets, cfg, init_rng, self.a_offsets)
                         for i in self.graphs.agents]
        # consumers[j]: agents whose actor update reads critic j
        self.consumers = {j: [lr.agent for lr in self.learners if j in lr.peers]
                          for j in self.graphs.agents}
        for j, users in self.consumers.items():
            missing = [i for i in users if i not in self.learners[j - 1].slots]
            if missing:
                raise KeyError(f"critic {j} does not see the actions of agents {missing}")
        cap = min(cfg.replay_capacity, max(cfg.epochs, 1))
        self.buffer = SharedReplay(cap, env.state_dim, int(self.a_offsets[-1]), env.n_agents)

    def _update(self, sample_rng: np.random.Generator):
        cfg, env = self.cfg, self.env
        s, a, r, s2 = self.buffer.batch(self.buffer.sample_indices(cfg.batch_size, sample_rng))
        f, f2 = env.features(s), env.features(s2)
        obs = env.observe_batch(f)
        obs2 = env.observe_batch(f2)
        needed = sorted(set().union(*(lr.i_q for lr in self.learners)))
        a2 = np.zeros_like(a)
        for j in needed:
            a2[:, self.a_offsets[j - 1]:self.a_offsets[j]] = \
                forward(self.learners[j - 1].target_actor, obs2[j - 1])
        inputs = [lr.critic_input(f, a) for lr in self.learners]
        c_grads, a_grads = [], []
        for lr, x in zip(self.learners, inputs):
            q_next = forward(lr.target_critic, lr.critic_input(f2, a2))[:, 0]
            y = td_target(r[:, lr.reward_set].sum(axis=1), cfg.gamma, q_next, cfg.literal_gamma)
            c_grads.append(critic_grads(lr, x, y, cfg.gamma, cfg.literal_gamma)[0])
        a_grads = self._actor_grads_batched(obs, inputs)
        # every gradient above used the pre-update snapshot; apply them together
        for lr, cg, ag in zip(self.learners, c_grads, a_grads):
            optim_step(lr.critic_opt, lr.critic, cg)
            optim_step(lr.actor_opt, lr.actor, ag)
            soft_update(lr.critic, lr.target_critic, cfg.tau)
            soft_update(lr.actor, lr.target_actor, cfg.tau)

    def _actor_grads_batched(self, obs, inputs):
        """Same result as :func:`actor_grads` for every agent, with less work.

        Critic j is evaluated for every agent i that reads it, with a_i swapped
        for pi_i(o_i). Only the first layer sees the swap, so the shared
        pre-activation is reused and only input gradients are formed.
        """
        m = self.cfg.batch_size
        caches = [forward_cache(lr.actor, obs[lr.agent - 1]) for lr in self.learners]
        dmu = [np.zeros_like(c[0]) for c in caches]
        for peer, x in zip(self.learners, inputs):
            users = self.consumers[peer.agent]
            if not users:
                continue
            w0 = peer.critic.weights[0]
            base = first_preactivation(peer.critic, x)
            full = np.full((m, 1), -1.0 / m)
            for i in users:
                sl = peer.slots[i]
                z = base + (caches[i - 1][0] - x[:, sl]) @ w0[sl]
                dz = backward_to_preactivation(peer.critic, forward_from_preactivation(peer.critic, z),
                                               full)
                dmu[i - 1] += dz @ w0[sl].T
        return [backward(lr.actor, obs[lr.agent - 1], g, c)
                for lr, g, c in zip(self.learners, dmu, caches)]

    def run(self, epochs: Optional[int] = None) -> RunRecord:
        cfg, env = self.cfg, self.env
        epochs = cfg.epochs if epochs is None else epochs
        env_rng = np.random.default_rng(self._env_ss)
        noise_rng = np.random.default_rng(self._noise_ss)
        sample_rng = np.random.default_rng(self._sample_ss)
        rec = self.record = RunRecord(self.seed, str(self.variant))
        start = time.perf_counter()
        state, ep_sum, ep_len = None, 0.0, 0
        for k in range(epochs):
            if k % cfg.episode_length == 0:
                state, ep_sum, ep_len = env.reset(env_rng), 0.0, 0
            sv = env.state_vector(state)
            obs = env.observe_batch(env.features(sv[None, :]))
            sigma = cfg.sigma(k)
            actions = [act_explore(lr, obs[lr.agent - 1][0], sigma, noise_rng)
                       for lr in self.learners]
            state, rewards = env.step(state, actions, env_rng)
            self.buffer.add(sv, np.concatenate(actions), rewards, env.state_vector(state))
            team = float(np.sum(rewards))
            ep_sum += team
            ep_len += 1
            rec.step_reward.append(team)
            rec.episode_return.append(ep_sum / ep_len)
            w = rec.step_reward[-cfg.smooth_window:]
            rec.smoothed_return.append(sum(w) / len(w))
            rec.max_abs_reward = max(rec.max_abs_reward, float(np.max(np.abs(rewards))))
            if len(self.buffer) >= cfg.warmup_steps and k % cfg.update_interval == 0:
                self._update(sample_rng)
                bad = [lr.agent for lr in self.learners
                       if has_nan(lr.actor) or has_nan(lr.critic)]
                if bad:
                    raise TrainingDiverged(f"non-finite parameters for agents {bad} at epoch {k}")
        rec.wall_clock = time.perf_counter() - start
        return rec

    def save_checkpoints(self, directory: str | Path):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for lr in self.learners:
            for name, net in lr.networks().items():
                net.save(d / f"agent{lr.agent}_{name}.json")


def train(cfg: TrainConfig, env: EnvModel, graphs: Optional[CouplingGraphs] = None,
          seed: int = 0) -> RunRecord:
    return Trainer(cfg, env, graphs, seed).run()


def final_fraction_stats(records: Sequence[RunRecord], episode_length: int,
                         fraction: float = 0.2) -> tuple[float, float]:
    """Mean and std of episode returns in the last ceil(fraction * K) epochs, pooled over seeds."""
    pool = []
    for rec in records:
        if rec.failed:
            continue
        k = len(rec.step_reward)
        tail = math.ceil(fraction * k)
        eps = rec.episode_means(episode_length)
        first = (k - tail) // episode_length
        pool.extend(eps[first:])
    if not pool:
        return float("nan"), float("nan")
    return float(np.mean(pool)), float(np.std(pool))
