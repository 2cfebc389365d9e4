"""Brute-force oracles on tabular games.

Everything here works on explicit joint tables, so it only scales to a handful
of agents. That is the point: the tables are the ground truth that the
structural results are checked against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Mapping, Optional, Sequence

import numpy as np

from .coupling import CouplingGraphs
from .dependency import GradientDependency, ValueDependency
from .environments import TabularPoscg

DEFAULT_CAP = 10 ** 7


@dataclass
class TabularPolicy:
    """Softmax policy per agent; ``logits[i]`` has shape (n_obs_i, n_actions_i)."""

    logits: dict

    def probs(self, i: int) -> np.ndarray:
        z = self.logits[i]
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def copy(self) -> "TabularPolicy":
        return TabularPolicy({i: z.copy() for i, z in self.logits.items()})


def random_policy(poscg: TabularPoscg, rng: np.random.Generator, scale: float = 1.0) -> TabularPolicy:
    return TabularPolicy({i: scale * rng.standard_normal((poscg.n_obs(i), poscg.n_actions[i - 1]))
                          for i in poscg.graphs.agents})


def _joint_actions(poscg: TabularPoscg) -> np.ndarray:
    return np.array(list(itertools.product(*(range(k) for k in poscg.n_actions))))


def joint_policy(poscg: TabularPoscg, policy: TabularPolicy) -> np.ndarray:
    """Pi[s, a] = prod_i pi_i(a_i | o_i(s))."""
    obs = poscg.obs_table()
    acts = _joint_actions(poscg)
    pi = np.ones((poscg.n_joint_states, poscg.n_joint_actions))
    for i in poscg.graphs.agents:
        p = policy.probs(i)[obs[i - 1]]
        pi *= p[:, acts[:, i - 1]]
    return pi


@dataclass
class QOracle:
    q: np.ndarray  # (n_agents, S, A)
    gamma: float
    horizon: Optional[int]
    n_states: tuple
    n_actions: tuple

    def table(self, i: int) -> np.ndarray:
        """Q_i with one axis per agent state followed by one axis per agent action."""
        return self.q[i - 1].reshape(self.n_states + self.n_actions)

    @property
    def total(self) -> np.ndarray:
        return self.q.sum(axis=0)

    def subset(self, agents) -> np.ndarray:
        agents = sorted(agents)
        if not agents:
            return np.zeros_like(self.q[0])
        return self.q[np.array(agents) - 1].sum(axis=0)


def _check_cap(poscg: TabularPoscg, cap: int):
    total = poscg.n_joint_states * poscg.n_joint_actions
    if total > cap:
        raise ValueError(f"{total} state-action pairs exceed the cap of {cap}")


def brute_force_q(poscg: TabularPoscg, policy: TabularPolicy, horizon: Optional[int],
                  gamma: float, cap: int = DEFAULT_CAP, _cache=None) -> QOracle:
    """Exact Q_i for every agent.

    With a finite horizon, horizon 0 is the reward table and each extra step
    adds one expected discounted reward. ``horizon=None`` solves the
    infinite-horizon linear system (needs gamma < 1).
    """
    _check_cap(poscg, cap)
    if _cache is None:
        P, R = poscg.joint_transition(), poscg.joint_rewards()
    else:
        P, R = _cache
    pi = joint_policy(poscg, policy)
    S, A = pi.shape
    if horizon is None:
        if gamma >= 1:
            raise ValueError("the infinite-horizon oracle needs gamma < 1")
        K = (P.reshape(S * A, S)[:, :, None] * pi[None, :, :]).reshape(S * A, S * A)
        q = np.linalg.solve(np.eye(S * A) - gamma * K, R.reshape(len(R), S * A).T).T
        q = q.reshape(R.shape)
    else:
        q = R.copy()
        for _ in range(horizon):
            v = (q * pi[None]).sum(axis=2)
            q = R + gamma * np.einsum("xas,ns->nxa", P, v)
    return QOracle(q, gamma, horizon, poscg.n_states, poscg.n_actions)


def _outside_axes(n: int, members) -> tuple:
    return tuple(k for k in range(n) if k + 1 not in members) + \
        tuple(n + k for k in range(n) if k + 1 not in members)


def invariance_deviation(table: np.ndarray, n: int, members) -> float:
    """Largest spread of ``table`` over pairs that agree on the members' states and actions."""
    axes = _outside_axes(n, members)
    if not axes:
        return 0.0
    return float(np.max(table.max(axis=axes) - table.min(axis=axes)))


@dataclass
class VerifyReport:
    theorem: str
    cases: int
    max_error: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"theorem": self.theorem, "cases": int(self.cases),
                "max_error": float(self.max_error), "passed": bool(self.passed)}


def _violating_pair(table: np.ndarray, n: int, members):
    axes = _outside_axes(n, members)
    keep = [k for k in range(2 * n) if k not in axes]
    moved = np.moveaxis(table, keep, list(range(len(keep))))
    flat = moved.reshape(int(np.prod([table.shape[k] for k in keep])), -1)
    spread = flat.max(axis=1) - flat.min(axis=1)
    row = int(np.argmax(spread))
    lo, hi = int(np.argmin(flat[row])), int(np.argmax(flat[row]))
    inner = [table.shape[k] for k in axes]
    outer = np.unravel_index(row, [table.shape[k] for k in keep]) if keep else ()

    def rebuild(col):
        full = [0] * (2 * n)
        for k, v in zip(keep, outer):
            full[k] = int(v)
        for k, v in zip(axes, np.unravel_index(col, inner)):
            full[k] = int(v)
        return {"s": full[:n], "a": full[n:]}

    return rebuild(lo), rebuild(hi)


def verify_theorem1(oracle: QOracle, vd: ValueDependency, tol: float = 1e-10) -> VerifyReport:
    n = len(oracle.n_states)
    per_agent = {}
    worst, worst_agent = 0.0, None
    for i in range(1, n + 1):
        dev = invariance_deviation(oracle.table(i), n, vd.sets[i])
        per_agent[i] = dev
        if dev > worst:
            worst, worst_agent = dev, i
    details = {"per_agent": per_agent}
    if worst > tol:
        details["violation"] = {"agent": worst_agent,
                                "pair": _violating_pair(oracle.table(worst_agent), n,
                                                        vd.sets[worst_agent])}
    return VerifyReport("theorem1", 1, worst, worst <= tol, details)


def verify_theorem2(poscg: TabularPoscg, policy: TabularPolicy, gd: GradientDependency,
                    gamma: float, horizon: Optional[int] = None, h: float = 1e-5,
                    tol: float = 1e-6) -> VerifyReport:
    """Finite-difference check that d/dtheta_i of sum_j Q_j equals that of sum over I_GD^i."""
    cache = (poscg.joint_transition(), poscg.joint_rewards())
    worst = 0.0
    outside_worst = 0.0
    per_agent = {}
    for i in poscg.graphs.agents:
        members = gd.sets[i]
        others = [j for j in poscg.graphs.agents if j not in members]
        g_full, g_dec, g_out = [], [], []
        theta = policy.logits[i]
        for ix in np.ndindex(theta.shape):
            vals = []
            for sign in (1, -1):
                p = policy.copy()
                p.logits[i][ix] += sign * h
                o = brute_force_q(poscg, p, horizon, gamma, _cache=cache)
                vals.append((o.total, o.subset(members), o.subset(others)))
            g_full.append((vals[0][0] - vals[1][0]) / (2 * h))
            g_dec.append((vals[0][1] - vals[1][1]) / (2 * h))
            g_out.append((vals[0][2] - vals[1][2]) / (2 * h))
        g_full, g_dec = np.array(g_full), np.array(g_dec)
        err = float(np.max(np.abs(g_full - g_dec)) / max(np.max(np.abs(g_full)), 1e-12))
        per_agent[i] = err
        worst = max(worst, err)
        outside_worst = max(outside_worst, float(np.max(np.abs(g_out))))
    return VerifyReport("theorem2", 1, worst, worst <= tol,
                        {"per_agent": per_agent, "outside_grad_max": outside_worst})


def marginal_qhat(oracle: QOracle, i: int, gd: GradientDependency,
                  qhat: Mapping[int, frozenset]) -> tuple[np.ndarray, float]:
    """Qhat_i = sum over I_GD^i of Q_j, and its spread over coordinates outside I_Qhat^i."""
    n = len(oracle.n_states)
    table = oracle.subset(gd.sets[i]).reshape(oracle.n_states + oracle.n_actions)
    return table, invariance_deviation(table, n, qhat[i])


def qbar_action_deviation(oracle: QOracle, i: int, gd: GradientDependency) -> float:
    """Spread of Qbar_i = Q - Qhat_i along agent i's own action axis."""
    n = len(oracle.n_states)
    others = [j for j in range(1, n + 1) if j not in gd.sets[i]]
    table = oracle.subset(others).reshape(oracle.n_states + oracle.n_actions)
    axis = n + i - 1
    return float(np.max(table.max(axis=axis) - table.min(axis=axis)))


# ---------------------------------------------------------------- variance lab


def occupancy(poscg: TabularPoscg, policy: TabularPolicy, gamma: float) -> np.ndarray:
    """Normalized discounted state occupancy from the initial distribution."""
    P = poscg.joint_transition()
    pi = joint_policy(poscg, policy)
    p_pi = np.einsum("xa,xas->xs", pi, P)
    S = len(p_pi)
    d = np.linalg.solve((np.eye(S) - gamma * p_pi).T, poscg.init)
    return (1 - gamma) * d


def score_table(poscg: TabularPoscg, policy: TabularPolicy, i: int) -> np.ndarray:
    """grad_theta_i log pi_i(a_i | o_i(s)) for every (s, a), flattened: (S, A, n_obs*n_act)."""
    obs = poscg.obs_table()[i - 1]
    acts = _joint_actions(poscg)[:, i - 1]
    probs = policy.probs(i)
    n_obs, n_act = probs.shape
    S, A = poscg.n_joint_states, poscg.n_joint_actions
    g = np.zeros((S, A, n_obs, n_act))
    for s in range(S):
        o = obs[s]
        g[s, :, o, :] = -probs[o][None, :]
        g[s, np.arange(A), o, acts] += 1.0
    return g.reshape(S, A, n_obs * n_act)


def advantage_sup(poscg: TabularPoscg, policy: TabularPolicy, q_total: np.ndarray, j: int) -> float:
    """sup over (s, a) of |Q(s, a) - E_{a_j ~ pi_j} Q(s, a_-j, a_j)|."""
    n = poscg.n_agents
    S = poscg.n_joint_states
    qr = q_total.reshape((S,) + poscg.n_actions)
    pj = policy.probs(j)[poscg.obs_table()[j - 1]]
    qm = np.moveaxis(qr, j, -1)
    w = pj.reshape((S,) + (1,) * (n - 1) + (pj.shape[1],))
    marg = (qm * w).sum(axis=-1, keepdims=True)
    return float(np.max(np.abs(qm - marg)))


@dataclass
class VarianceReport:
    agent: int
    tvar_c: float
    tvar_q: float
    diff: float
    half_width: float
    exact_diff: float
    lower: float
    upper: float
    M: float
    N: float
    eps: dict
    noise: tuple
    n_samples: int
    outside: list

    @property
    def sign_ok(self) -> bool:
        return self.diff - self.half_width >= 0

    @property
    def in_sandwich(self) -> bool:
        return self.lower - self.half_width <= self.diff <= self.upper + self.half_width

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["eps"] = {str(k): v for k, v in self.eps.items()}
        d["noise"] = list(self.noise)
        d["half_width"] = float(self.half_width)
        d["sign_ok"] = bool(self.sign_ok)
        d["in_sandwich"] = bool(self.in_sandwich)
        return d


Z99 = NormalDist().inv_cdf(0.995)


def pg_estimators(poscg: TabularPoscg, policy: TabularPolicy, oracle: QOracle, i: int,
                  gd: GradientDependency, qhat: Mapping[int, frozenset],
                  noise: Sequence[float], n_samples: int, rng: np.random.Generator,
                  n_batches: int = 100) -> VarianceReport:
    """Monte Carlo total variances of the global-critic and structured score estimators.

    ``noise`` is (mu_Q, sigma_Q, mu_Qhat, sigma_Qhat). States come from the
    exact occupancy measure; only actions and noise are sampled.
    """
    mu_q, sd_q, mu_h, sd_h = noise
    gamma = oracle.gamma
    pi = joint_policy(poscg, policy)
    d = occupancy(poscg, policy, gamma)
    G = score_table(poscg, policy, i)
    q_tot = oracle.total
    q_hat = oracle.subset(gd.sets[i])
    S, A = pi.shape
    joint = (d[:, None] * pi).reshape(-1)
    joint = joint / joint.sum()

    flat = rng.choice(S * A, size=n_samples, p=joint)
    s, a = np.divmod(flat, A)
    g = G[s, a]
    gc = (q_tot[s, a] - rng.normal(mu_q, sd_q, n_samples))[:, None] * g
    gq = (q_hat[s, a] - rng.normal(mu_h, sd_h, n_samples))[:, None] * g

    def tvar(x):
        return float(np.var(x, axis=0, ddof=1).sum())

    diffs = [tvar(bc) - tvar(bq) for bc, bq in
             zip(np.array_split(gc, n_batches), np.array_split(gq, n_batches))]
    half = Z99 * float(np.std(diffs, ddof=1)) / np.sqrt(n_batches)
    tc, tq = tvar(gc), tvar(gq)

    w = joint.reshape(S, A)
    g2 = (G ** 2).sum(axis=2)
    e_g2 = float((w * g2).sum())

    def exact_tvar(q, mu, sd):
        second = float((w * (((q - mu) ** 2 + sd ** 2) * g2)).sum())
        mean = ((w * (q - mu))[:, :, None] * G).sum(axis=(0, 1))
        return second - float(mean @ mean)

    norms = np.sqrt(g2)
    M, N = float(norms.max()), float(norms.min())
    outside = [j for j in poscg.graphs.agents if j not in qhat[i]]
    eps = {j: advantage_sup(poscg, policy, q_tot, j) for j in outside}
    q_out = oracle.subset(outside)
    dsig = sd_q ** 2 - sd_h ** 2
    lower = float(N ** 2 * (w * q_out ** 2).sum()) + dsig * e_g2
    upper = M ** 2 * sum(e ** 2 for e in eps.values()) + dsig * e_g2
    return VarianceReport(i, tc, tq, tc - tq, half,
                          exact_tvar(q_tot, mu_q, sd_q) - exact_tvar(q_hat, mu_h, sd_h),
                          lower, upper, M, N, eps, tuple(noise), n_samples, outside)


def objective(poscg: TabularPoscg, policy: TabularPolicy, gamma: float, _cache=None) -> float:
    """J = E_{s0}[sum_i V_i(s0)] for the infinite-horizon discounted game."""
    o = brute_force_q(poscg, policy, None, gamma, _cache=_cache)
    v = (o.total * joint_policy(poscg, policy)).sum(axis=1)
    return float(poscg.init @ v)


def stochastic_pg(poscg: TabularPoscg, policy: TabularPolicy, oracle: QOracle, i: int,
                  gd: GradientDependency, n_samples: int, rng: np.random.Generator,
                  h: float = 1e-5) -> dict:
    """Score-function gradient built from Qhat_i, next to its exact value and a finite difference of J."""
    gamma = oracle.gamma
    pi = joint_policy(poscg, policy)
    d = occupancy(poscg, policy, gamma)
    G = score_table(poscg, policy, i)
    q_hat = oracle.subset(gd.sets[i])
    S, A = pi.shape
    w = d[:, None] * pi
    scale = 1.0 / (1.0 - gamma)
    exact = scale * ((w * q_hat)[:, :, None] * G).sum(axis=(0, 1))

    flat = rng.choice(S * A, size=n_samples, p=(w / w.sum()).reshape(-1))
    s, a = np.divmod(flat, A)
    samples = scale * q_hat[s, a][:, None] * G[s, a]
    estimate = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(n_samples)

    cache = (poscg.joint_transition(), poscg.joint_rewards())
    fd = np.zeros(policy.logits[i].size)
    for k, ix in enumerate(np.ndindex(policy.logits[i].shape)):
        vals = []
        for sign in (1, -1):
            p = policy.copy()
            p.logits[i][ix] += sign * h
            vals.append(objective(poscg, p, gamma, cache))
        fd[k] = (vals[0] - vals[1]) / (2 * h)
    return {"estimate": estimate, "stderr": stderr, "exact": exact, "finite_difference": fd}


# ---------------------------------------------------------------- instances


def variance_instance(kind: str = "centered", seed: int = 0, offset: float = 3.0):
    """Three binary agents where agent 1 drives agent 2 and agent 3 is a bystander.

    ``centered``: the bystander's reward has zero mean under its own policy,
    so it adds pure noise to the global critic. ``offset``: the bystander
    earns a constant, which breaks the upper bound (kept as a documented
    counterexample).
    """
    from .environments import random_tabular

    rng = np.random.default_rng(seed)
    graphs = CouplingGraphs(3, {(1, 2)})
    game = random_tabular(graphs, rng)
    policy = random_policy(game, rng, scale=0.5)
    r3 = game.reward[3]
    if kind == "centered":
        p3 = policy.probs(3)
        game.reward[3] = r3 - (r3 * p3).sum(axis=1, keepdims=True)
    elif kind == "offset":
        game.reward[3] = np.full_like(r3, offset)
    else:
        raise ValueError(f"unknown instance kind {kind!r}")
    return game, policy


# ---------------------------------------------------------------- suites


def suite_dependency_oracles(cases: int = 200, seed: int = 0, max_agents: int = 8,
                             max_horizon: int = 6) -> VerifyReport:
    """Recursion, path finding on the unrolled network and kappa search on the folded one."""
    from .coupling import derive_index_sets, random_graphs
    from .dependency import (kappa_dependency, saturation_kappa, value_dependency,
                             value_dependency_by_pathfinding)
    from .mabn import build_folded, build_full

    rng = np.random.default_rng(seed)
    mismatches = []
    for c in range(cases):
        n = int(rng.integers(1, max_agents + 1))
        horizon = int(rng.integers(0, max_horizon + 1))
        g = random_graphs(n, rng, float(rng.uniform(0.05, 0.5)))
        idx = derive_index_sets(g)
        rec = value_dependency(idx, 0, horizon).sets
        path = value_dependency_by_pathfinding(build_full(idx, horizon)).sets
        folded = build_folded(idx)
        ok = rec == path
        if horizon >= 1:
            ok &= kappa_dependency(folded, horizon - 1).sets == rec
        ok &= saturation_kappa(folded).sets == value_dependency(idx).sets
        if not ok:
            mismatches.append({"case": c, "graphs": g.to_dict(), "horizon": horizon})
    return VerifyReport("dependency-oracles", cases, float(len(mismatches)), not mismatches,
                        {"mismatches": mismatches[:5]})


def _mutated(vd: ValueDependency, rng: np.random.Generator) -> ValueDependency:
    """Drop one agent from one I_Q set, preferring a member other than the owner."""
    i = int(rng.integers(1, len(vd.sets) + 1))
    members = sorted(vd.sets[i] - {i}) or [i]
    drop = members[int(rng.integers(len(members)))]
    sets = dict(vd.sets)
    sets[i] = vd.sets[i] - {drop}
    return ValueDependency(sets, vd.t, vd.horizon)


def suite_theorem1(cases: int = 200, seed: int = 0, mutate: bool = False, n_agents: int = 3,
                   horizon: int = 3, gamma: float = 0.9, tol: float = 1e-10) -> VerifyReport:
    """Q_i invariance outside I_Q^i on random games; ``mutate`` shrinks one set per game."""
    from .coupling import derive_index_sets, random_graphs
    from .dependency import value_dependency
    from .environments import random_tabular

    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for _ in range(cases):
        g = random_graphs(n_agents, rng, 0.3)
        game = random_tabular(g, rng)
        oracle = brute_force_q(game, random_policy(game, rng), horizon, gamma)
        vd = value_dependency(derive_index_sets(g), 0, horizon)
        if mutate:
            vd = _mutated(vd, rng)
        r = verify_theorem1(oracle, vd, tol)
        worst = max(worst, r.max_error)
        failures += not r.passed
    name = "theorem1-mutated" if mutate else "theorem1"
    return VerifyReport(name, cases, worst, failures == 0, {"failed_cases": failures})


def suite_theorem2(cases: int = 20, seed: int = 0, n_agents: int = 3, gamma: float = 0.9,
                   tol: float = 1e-6) -> VerifyReport:
    from .coupling import derive_index_sets, random_graphs
    from .dependency import gradient_dependency, value_dependency
    from .environments import random_tabular

    rng = np.random.default_rng(seed)
    worst, nontrivial = 0.0, 0
    for _ in range(cases):
        g = random_graphs(n_agents, rng, 0.2)
        game = random_tabular(g, rng)
        gd = gradient_dependency(value_dependency(derive_index_sets(g)))
        nontrivial += any(len(s) < n_agents for s in gd.sets.values())
        r = verify_theorem2(game, random_policy(game, rng), gd, gamma, None, tol=tol)
        worst = max(worst, r.max_error)
    return VerifyReport("theorem2", cases, worst, worst <= tol, {"nontrivial_cases": nontrivial})


def suite_theorem4(seed: int = 0, n_samples: int = 100_000,
                   noise: Sequence[float] = (0.0, 1.0, 0.0, 0.5)) -> VerifyReport:
    """Variance gap sign and sandwich on the centred instance, for agent 1."""
    from .coupling import derive_index_sets
    from .dependency import gradient_dependency, qhat_sets, value_dependency

    game, policy = variance_instance("centered", seed)
    vd = value_dependency(derive_index_sets(game.graphs))
    gd = gradient_dependency(vd)
    oracle = brute_force_q(game, policy, None, 0.9)
    rep = pg_estimators(game, policy, oracle, 1, gd, qhat_sets(vd, gd), noise, n_samples,
                        np.random.default_rng(seed + 1))
    err = max(0.0, rep.lower - rep.half_width - rep.diff, rep.diff - rep.upper - rep.half_width)
    return VerifyReport("theorem4", 1, float(err), rep.sign_ok and rep.in_sandwich,
                        rep.to_dict())


def suite_grad_check(seed: int = 0) -> VerifyReport:
    from .neural import grad_check, init_glorot

    rng = np.random.default_rng(seed)
    worst, per_head = 0.0, {}
    for head in ("softmax", "tanh", "linear"):
        net = init_glorot((5, 8, 7, 3), head, rng, u_max=2.0)
        x = rng.standard_normal((6, 5))
        err = grad_check(net, x, rng.standard_normal((6, 3)))
        per_head[head] = err
        worst = max(worst, err)
    return VerifyReport("grad-check", 3, worst, worst <= 1e-4, {"per_head": per_head})


SUITES = {"theorem1": suite_theorem1, "theorem2": suite_theorem2, "theorem4": suite_theorem4,
          "dependency-oracles": suite_dependency_oracles, "grad-check": suite_grad_check}
