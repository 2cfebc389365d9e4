import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structured_marl.analysis import (brute_force_q, invariance_deviation, marginal_qhat,
                                      objective, occupancy, pg_estimators, qbar_action_deviation,
                                      random_policy, stochastic_pg, suite_theorem1,
                                      variance_instance, verify_theorem1, verify_theorem2)
from structured_marl.coupling import CouplingGraphs, derive_index_sets, fixture
from structured_marl.dependency import (ValueDependency, gradient_dependency, qhat_sets,
                                        value_dependency)
from structured_marl.environments import random_tabular

from .strategies import graphs


def _setup(g, seed, horizon=None):
    rng = np.random.default_rng(seed)
    game = random_tabular(g, rng)
    policy = random_policy(game, rng)
    return game, policy, brute_force_q(game, policy, horizon, 0.9)


def test_horizon_zero_is_reward_table():
    game, policy, oracle = _setup(CouplingGraphs(2, {(1, 2)}), 0, horizon=0)
    np.testing.assert_array_equal(oracle.q, game.joint_rewards())


def test_finite_horizon_converges_to_discounted_solution():
    g = CouplingGraphs(2, {(1, 2)}, {(2, 1)})
    game, policy, inf = _setup(g, 1)
    finite = brute_force_q(game, policy, 400, 0.9)
    np.testing.assert_allclose(finite.q, inf.q, atol=1e-12)


def test_infinite_horizon_needs_discount():
    game, policy, _ = _setup(CouplingGraphs(2), 0, horizon=1)
    with pytest.raises(ValueError):
        brute_force_q(game, policy, None, 1.0)


def test_cap_enforced():
    game, policy, _ = _setup(CouplingGraphs(2), 0, horizon=1)
    with pytest.raises(ValueError):
        brute_force_q(game, policy, 1, 0.9, cap=8)


@settings(max_examples=200, deadline=None)
@given(graphs(max_agents=3), st.integers(0, 3), st.integers(0, 10 ** 6))
def test_q_invariant_outside_value_dependency(g, horizon, seed):
    _, _, oracle = _setup(g, seed, horizon)
    vd = value_dependency(derive_index_sets(g), 0, horizon)
    assert verify_theorem1(oracle, vd).passed


@settings(max_examples=30, deadline=None)
@given(graphs(max_agents=3), st.integers(0, 10 ** 6))
def test_q_invariant_at_fixed_point(g, seed):
    _, _, oracle = _setup(g, seed)
    assert verify_theorem1(oracle, value_dependency(derive_index_sets(g))).passed


def test_mutation_is_caught_with_a_witness():
    g = CouplingGraphs(3, {(1, 2)}, {(2, 3)})
    _, _, oracle = _setup(g, 2, horizon=3)
    vd = value_dependency(derive_index_sets(g), 0, 3)
    sets = dict(vd.sets)
    sets[3] = sets[3] - {2}
    r = verify_theorem1(oracle, ValueDependency(sets, 0, 3))
    assert not r.passed
    pair = r.details["violation"]["pair"]
    assert r.details["violation"]["agent"] == 3
    # the two witnesses differ only outside the mutated set
    diff = [k for k in range(3) if pair[0]["s"][k] != pair[1]["s"][k]]
    diff += [k for k in range(3) if pair[0]["a"][k] != pair[1]["a"][k]]
    assert diff and all(k + 1 not in sets[3] for k in diff)


def test_mutation_suite_fails():
    assert not suite_theorem1(cases=20, seed=1, mutate=True).passed


@settings(max_examples=15, deadline=None)
@given(graphs(max_agents=3), st.integers(0, 10 ** 6))
def test_gradient_decomposition(g, seed):
    game, policy, _ = _setup(g, seed)
    gd = gradient_dependency(value_dependency(derive_index_sets(g)))
    r = verify_theorem2(game, policy, gd, 0.9)
    assert r.passed
    assert r.details["outside_grad_max"] <= 1e-6


def test_qhat_constant_outside_its_set():
    g = fixture("six_agent")
    # two states and actions for six agents is 4096 joint pairs; fine for the oracle
    game, policy, oracle = _setup(g, 3, horizon=2)
    vd = value_dependency(derive_index_sets(g), 0, 2)
    gd = gradient_dependency(vd)
    qh = qhat_sets(vd, gd)
    for i in g.agents:
        _, spread = marginal_qhat(oracle, i, gd, qh)
        assert spread <= 1e-10
        assert qbar_action_deviation(oracle, i, gd) <= 1e-10


def test_invariance_deviation_of_constant():
    assert invariance_deviation(np.ones((2, 2, 2, 2)), 2, {1}) == 0.0


def test_occupancy_is_a_distribution():
    game, policy, _ = _setup(CouplingGraphs(3, {(1, 2)}), 0)
    d = occupancy(game, policy, 0.9)
    assert abs(d.sum() - 1) < 1e-12 and (d >= -1e-15).all()


def _variance(kind, n=100_000, noise=(0.0, 1.0, 0.0, 0.5)):
    game, policy = variance_instance(kind)
    vd = value_dependency(derive_index_sets(game.graphs))
    gd = gradient_dependency(vd)
    oracle = brute_force_q(game, policy, None, 0.9)
    return pg_estimators(game, policy, oracle, 1, gd, qhat_sets(vd, gd), noise, n,
                         np.random.default_rng(1))


def test_variance_sandwich_on_centred_instance():
    r = _variance("centered")
    assert r.outside == [3]
    assert r.sign_ok and r.in_sandwich
    assert abs(r.diff - r.exact_diff) <= r.half_width
    assert r.lower <= r.exact_diff <= r.upper


def test_offset_bystander_breaks_upper_bound():
    r = _variance("offset")
    assert r.sign_ok
    assert r.diff > r.upper + r.half_width


def test_equal_noise_keeps_sign():
    r = _variance("centered", noise=(0.0, 0.5, 0.0, 0.5))
    assert r.exact_diff >= 0


def test_stochastic_gradient_matches_finite_difference():
    game, policy = variance_instance("centered")
    vd = value_dependency(derive_index_sets(game.graphs))
    gd = gradient_dependency(vd)
    oracle = brute_force_q(game, policy, None, 0.9)
    out = stochastic_pg(game, policy, oracle, 1, gd, 50_000, np.random.default_rng(0))
    np.testing.assert_allclose(out["exact"], out["finite_difference"], atol=1e-7)
    assert np.all(np.abs(out["estimate"] - out["exact"]) <= 4 * out["stderr"] + 1e-12)


def test_objective_is_finite():
    game, policy, _ = _setup(CouplingGraphs(2), 0)
    assert np.isfinite(objective(game, policy, 0.9))


def test_unknown_instance():
    with pytest.raises(ValueError):
        variance_instance("skewed")
