import copy
from dataclasses import replace

import numpy as np
import pytest

from structured_marl.coupling import CouplingGraphs, derive_index_sets, fixture
from structured_marl.environments import Thermal, Warehouse, builtin_config
from structured_marl.mastac import (SharedReplay, TrainConfig, Trainer, TrainingDiverged,
                                    act_explore, actor_grads, critic_grads, critic_update,
                                    final_fraction_stats, parse_variant, sample_projection,
                                    td_target, variant_dependency, RunRecord)
from structured_marl.neural import forward, has_nan, numeric_grad

SMALL = TrainConfig(epochs=60, batch_size=16, hidden=(8, 8), actor_hidden=(8,), episode_length=8)


def six_agent_trainer(variant="exact", seed=0, **kw):
    g = fixture("six_agent")
    return Trainer(replace(SMALL, variant=variant, **kw), Warehouse(g), g, seed)


def test_td_target_examples():
    r = np.array([-0.5])
    assert td_target(r, 0.95, np.array([2.0]))[0] == pytest.approx(1.4)
    assert td_target(r, 0.95, np.zeros(1))[0] == -0.5
    assert td_target(r, 0.0, np.array([7.0]))[0] == -0.5
    assert td_target(r, 0.5, np.array([2.0]), literal=True)[0] == 1.5


def test_variant_parsing():
    assert str(parse_variant("Kappa:3")) == "kappa:3"
    for bad in ("kappa:-1", "global", "kappa:x"):
        with pytest.raises(ValueError):
            parse_variant(bad)


def test_variant_sets():
    dec = variant_dependency("exact", CouplingGraphs(3))
    assert all(dec.i_q[i] == dec.i_gd[i] == {i} for i in range(1, 4))
    und = variant_dependency("undecq", fixture("warehouse9"))
    assert all(len(s) == 9 for s in und.i_q.values())
    full = variant_dependency("exact", fixture("warehouse40"))
    k2 = variant_dependency("kappa:2", fixture("warehouse40"))
    assert all(k2.i_q[i] < full.i_q[i] for i in range(1, 41))
    uh = variant_dependency("undecqhat", fixture("six_agent"))
    assert uh.peers[3] == {3} and uh.reward_sets[3] == {3, 4}


def test_act_explore_contracts():
    tr = six_agent_trainer()
    lr = tr.learners[0]
    o = np.ones(len(lr.obs_index))
    assert np.array_equal(act_explore(lr, o, 0.0, np.random.default_rng(0)), forward(lr.actor, o))
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = act_explore(lr, o, 2.0, rng)
        assert (a >= 0).all() and abs(a.sum() - 1) <= 1e-12
    seq = [[act_explore(lr, o, 0.3, np.random.default_rng(7)).tobytes() for _ in range(3)]
           for _ in range(2)]
    assert seq[0] == seq[1]


def test_thermal_actions_stay_in_bounds():
    g = fixture("thermal40")
    tr = Trainer(replace(SMALL, actor_hidden=()), Thermal(g), g, 0)
    lr = tr.learners[0]
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert abs(act_explore(lr, 1e3 * rng.standard_normal(len(lr.obs_index)), 50.0, rng)[0]) \
            <= 15.0


def test_sample_projection_slices():
    tr = six_agent_trainer()
    tr.run(20)
    rng = np.random.default_rng(0)
    p = sample_projection(tr.buffer, tr.learners[0], 8, rng, tr.env)
    assert tr.learners[0].i_q == [1, 2]
    assert p["s"].shape == (8, 4) and sorted(p["o2"]) == [1, 2]
    tr_u = six_agent_trainer("undecq")
    tr_u.run(20)
    q = sample_projection(tr_u.buffer, tr_u.learners[0], 8, np.random.default_rng(0), tr_u.env)
    s, a, _, _ = tr_u.buffer.batch(tr_u.buffer.sample_indices(8, np.random.default_rng(0)))
    assert np.array_equal(q["s"], s) and np.array_equal(q["a"], a)
    with pytest.raises(ValueError):
        SharedReplay(10, 2, 2, 1).sample_indices(4, rng)


def test_six_agent_peers():
    tr = six_agent_trainer()
    assert tr.learners[2].peers == [3, 4]
    dec = Trainer(SMALL, Warehouse(CouplingGraphs(3)), None, 0)
    assert all(lr.peers == [lr.agent] for lr in dec.learners)


def test_critic_zero_residual_means_no_change():
    tr = six_agent_trainer()
    lr = tr.learners[0]
    x = np.random.default_rng(0).standard_normal((5, lr.critic.layer_sizes[0]))
    y = forward(lr.critic, x)[:, 0]
    before = [p.copy() for p in lr.critic.params]
    critic_update(lr, x, y)
    assert all(np.array_equal(p, q) for p, q in zip(lr.critic.params, before))


def test_linear_critic_closed_form():
    tr = six_agent_trainer(hidden=())
    lr = tr.learners[0]
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, lr.critic.layer_sizes[0]))
    y = np.array([0.7])
    g, _ = critic_grads(lr, x, y)
    resid = y[0] - float(x[0] @ lr.critic.weights[0][:, 0] + lr.critic.biases[0][0])
    np.testing.assert_allclose(g.weights[0][:, 0], -2 * resid * x[0], rtol=1e-12)
    np.testing.assert_allclose(g.biases[0], [-2 * resid], rtol=1e-12)


def test_critic_step_reduces_loss():
    tr = six_agent_trainer()
    lr = tr.learners[2]
    lr.critic_opt.lr = 1e-4
    rng = np.random.default_rng(2)
    x = rng.standard_normal((32, lr.critic.layer_sizes[0]))
    y = rng.standard_normal(32)
    before = critic_grads(lr, x, y)[1]
    critic_update(lr, x, y)
    assert critic_grads(lr, x, y)[1] < before


def _inputs(tr, rng):
    s, a, _, _ = tr.buffer.batch(tr.buffer.sample_indices(tr.cfg.batch_size, rng))
    f = tr.env.features(s)
    return tr.env.observe_batch(f), [lr.critic_input(f, a) for lr in tr.learners]


def test_actor_gradient_matches_finite_differences():
    tr = six_agent_trainer()
    tr.run(20)
    obs, inputs = _inputs(tr, np.random.default_rng(3))
    lr = tr.learners[2]
    peers = [tr.learners[j - 1] for j in lr.peers]
    peer_x = [inputs[p.agent - 1] for p in peers]
    o = obs[2]

    def objective():
        mu = forward(lr.actor, o)
        total = 0.0
        for p, x in zip(peers, peer_x):
            x = x.copy()
            x[:, p.slots[3]] = mu
            total -= forward(p.critic, x).mean()
        return total

    g = actor_grads(lr, peers, o, peer_x)
    for a, p in zip(g.params, lr.actor.params):
        n = numeric_grad(objective, p)
        scale = max(np.abs(n).max(), 1e-8)
        assert np.abs(a - n).max() / scale <= 1e-4


def test_batched_actor_gradients_match_reference():
    for variant in ("exact", "undecq", "undecqhat", "kappa:0"):
        tr = six_agent_trainer(variant)
        tr.run(20)
        obs, inputs = _inputs(tr, np.random.default_rng(4))
        fast = tr._actor_grads_batched(obs, inputs)
        for lr, fg in zip(tr.learners, fast):
            peers = [tr.learners[j - 1] for j in lr.peers]
            ref = actor_grads(lr, peers, obs[lr.agent - 1], [inputs[p.agent - 1] for p in peers])
            for x, y in zip(ref.params, fg.params):
                np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-15)


def test_actor_grads_rejects_missing_peer():
    tr = six_agent_trainer()
    tr.run(20)
    obs, inputs = _inputs(tr, np.random.default_rng(0))
    with pytest.raises(KeyError):
        actor_grads(tr.learners[0], [tr.learners[4]], obs[0], [inputs[4]])


@pytest.mark.parametrize("variant", ["exact", "undecq", "undecqhat", "kappa:0"])
@pytest.mark.parametrize("probe", [1, 3, 5])
def test_information_locality(variant, probe):
    """Perturb one agent's replay coordinates; only declared readers may change."""
    base = six_agent_trainer(variant)
    base.run(20)
    moved = copy.deepcopy(base)
    b, rng = moved.buffer, np.random.default_rng(9)
    cols = moved.env.coords([probe])
    acols = slice(moved.a_offsets[probe - 1], moved.a_offsets[probe])
    for arr, c in ((b.s, cols), (b.s2, cols), (b.a, acols)):
        arr[:, c] += 5.0 * rng.standard_normal(arr[:, c].shape)
    b.r[:, probe - 1] += 5.0 * rng.standard_normal(len(b.r))
    base._update(np.random.default_rng(0))
    moved._update(np.random.default_rng(0))
    idx = base.env.idx
    same = lambda n1, n2: all(np.array_equal(p, q) for p, q in zip(n1.params, n2.params))
    for lr, lm in zip(base.learners, moved.learners):
        critic_reads = set(lr.i_q) | {int(k) + 1 for k in lr.reward_set}
        critic_reads |= set().union(*(idx.i_o[j] for j in lr.i_q))
        assert same(lr.critic, lm.critic) == (probe not in critic_reads), lr.agent
        actor_reads = set(idx.i_o[lr.agent]).union(*(base.learners[j - 1].i_q for j in lr.peers))
        if probe not in actor_reads:
            assert same(lr.actor, lm.actor), lr.agent
        elif base.env.act_dims[lr.agent - 1] > 1:
            assert not same(lr.actor, lm.actor), lr.agent


def test_target_mixing_identity():
    tr = six_agent_trainer()
    tr.run(20)
    old = [(lr.target_critic.copy(), lr.target_actor.copy()) for lr in tr.learners]
    tr._update(np.random.default_rng(0))
    tau = tr.cfg.tau
    for lr, (tc, ta) in zip(tr.learners, old):
        for main, new, prev in ((lr.critic, lr.target_critic, tc), (lr.actor, lr.target_actor, ta)):
            for p, q, r in zip(main.params, new.params, prev.params):
                np.testing.assert_allclose(q, tau * p + (1 - tau) * r, rtol=1e-13, atol=1e-15)


def test_zero_epochs():
    tr = six_agent_trainer()
    init = [p.copy() for lr in tr.learners for p in lr.actor.params + lr.critic.params]
    rec = tr.run(0)
    assert rec.episode_return == [] and rec.smoothed_return == []
    now = [p for lr in tr.learners for p in lr.actor.params + lr.critic.params]
    assert all(np.array_equal(p, q) for p, q in zip(init, now))


def test_same_seed_same_record():
    recs = [six_agent_trainer(seed=3).run(40) for _ in range(2)]
    assert recs[0].step_reward == recs[1].step_reward
    assert recs[0].smoothed_return == recs[1].smoothed_return
    assert six_agent_trainer(seed=4).run(40).step_reward != recs[0].step_reward


def test_metric_rows_per_epoch():
    rec = six_agent_trainer().run(10)
    assert len(rec.episode_return) == len(rec.smoothed_return) == 10
    assert rec.episode_return[0] == rec.step_reward[0]
    assert rec.episode_return[8] == rec.step_reward[8]


def test_nan_aborts():
    tr = six_agent_trainer()
    tr.learners[0].critic.weights[0][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        tr.run(20)


def test_final_fraction_convention():
    rec = RunRecord(0, "exact", step_reward=[0.0] * 40 + [1.0] * 10)
    # K=50, tail of ceil(10) epochs starting at epoch 40, episodes of 5
    assert final_fraction_stats([rec], 5) == (1.0, 0.0)
    failed = RunRecord(1, "exact", step_reward=[9.0] * 50, failed=True)
    assert final_fraction_stats([rec, failed], 5) == (1.0, 0.0)


def test_sigma_schedule():
    cfg = TrainConfig(epochs=100)
    assert cfg.sigma(0) == 0.3 and cfg.sigma(50) == 0.05 and cfg.sigma(99) == 0.05
    assert cfg.sigma(25) == pytest.approx(0.175)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")


def test_checkpoints(tmp_path):
    tr = six_agent_trainer()
    tr.save_checkpoints(tmp_path)
    assert len(list(tmp_path.iterdir())) == 24
