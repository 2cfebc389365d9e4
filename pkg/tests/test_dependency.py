import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structured_marl.coupling import CouplingGraphs, IndexSets, derive_index_sets, fixture
from structured_marl.dependency import (analyze, gradient_dependency, kappa_dependency, qhat_sets,
                                        saturation_kappa, strongly_connected_components, u_sets,
                                        value_dependency, value_dependency_by_pathfinding)
from structured_marl.mabn import build_folded, build_full

from .strategies import graphs

IDX6 = derive_index_sets(fixture("six_agent"))
ALL6 = frozenset(range(1, 7))


def test_six_agent_sets():
    vd = value_dependency(IDX6)
    gd = gradient_dependency(vd)
    assert vd.as_lists() == {1: [1, 2], 2: [1, 2], 3: list(range(1, 7)), 4: list(range(1, 7)),
                             5: [5, 6], 6: [5, 6]}
    assert gd.as_lists() == {1: [1, 2, 3, 4], 2: [1, 2, 3, 4], 3: [3, 4], 4: [3, 4],
                             5: [3, 4, 5, 6], 6: [3, 4, 5, 6]}
    assert all(s == ALL6 for s in qhat_sets(vd, gd).values())


def test_six_agent_u_sets():
    u = u_sets(IDX6, 0, 4)
    assert u[3] == [ALL6] * 4 + [frozenset({3, 4})]
    assert u[1] == [frozenset({1, 2})] * 4 + [frozenset({1})]


def test_warehouse9_sizes():
    vd = value_dependency(derive_index_sets(fixture("warehouse9")))
    assert [len(vd.sets[i]) for i in range(1, 10)] == [2, 2, 6, 6, 2, 2, 5, 5, 5]


def test_warehouse40_complete_and_kappa2():
    idx = derive_index_sets(fixture("warehouse40"))
    assert all(len(s) == 40 for s in value_dependency(idx).sets.values())
    kd = kappa_dependency(build_folded(idx), 2)
    assert len(kd.sets[1]) == 15


def test_thermal40_two_components():
    vd = value_dependency(derive_index_sets(fixture("thermal40")))
    comps = strongly_connected_components(vd.edges, 40)
    assert len(comps) == 2
    assert all(len(s) == 20 for s in vd.sets.values())


def test_decoupled_gives_singletons():
    vd = value_dependency(derive_index_sets(CouplingGraphs(4)))
    assert vd.as_lists() == {i: [i] for i in range(1, 5)}


@settings(max_examples=200, deadline=None)
@given(graphs(max_agents=8), st.integers(0, 6))
def test_three_oracles_agree(g, horizon):
    idx = derive_index_sets(g)
    rec = value_dependency(idx, 0, horizon).sets
    assert value_dependency_by_pathfinding(build_full(idx, horizon)).sets == rec
    if horizon >= 1:
        assert kappa_dependency(build_folded(idx), horizon - 1).sets == rec


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=6), st.integers(0, 4), st.data())
def test_oracles_agree_at_later_start(g, horizon, data):
    idx = derive_index_sets(g)
    t = data.draw(st.integers(0, horizon))
    rec = value_dependency(idx, t, horizon).sets
    assert value_dependency_by_pathfinding(build_full(idx, horizon), t).sets == rec


@settings(max_examples=100, deadline=None)
@given(st.lists(graphs(min_agents=4, max_agents=4), min_size=1, max_size=5))
def test_oracles_agree_on_time_varying_graphs(seq):
    tv = tuple(derive_index_sets(g) for g in seq)
    horizon = len(tv) - 1
    rec = value_dependency(tv, 0, horizon).sets
    assert value_dependency_by_pathfinding(build_full(tv, horizon)).sets == rec


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=7))
def test_saturation_matches_fixed_point(g):
    idx = derive_index_sets(g)
    assert saturation_kappa(build_folded(idx)).sets == value_dependency(idx).sets


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=7), st.integers(0, 5))
def test_kappa_sets_grow_with_kappa(g, kappa):
    f = build_folded(derive_index_sets(g))
    small, big = kappa_dependency(f, kappa).sets, kappa_dependency(f, kappa + 1).sets
    assert all(small[i] <= big[i] for i in small)


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=7), st.integers(1, 6))
def test_u_sets_shrink_toward_the_horizon(g, horizon):
    # static graphs: U^{tau+1} is contained in U^tau
    u = u_sets(derive_index_sets(g), 0, horizon)
    for seq in u.values():
        for a, b in zip(seq, seq[1:]):
            assert b <= a


def test_u_set_growth_forward_in_time_fails_on_fixture():
    # the opposite containment (U^tau within U^{tau+1}) is false in general
    u = u_sets(IDX6, 0, 4)[3]
    assert not u[3] <= u[4]


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=7))
def test_gradient_dependency_is_transpose(g):
    vd = value_dependency(derive_index_sets(g))
    gd = gradient_dependency(vd)
    for i in vd.sets:
        for j in vd.sets[i]:
            assert i in gd.sets[j]
    qh = qhat_sets(vd, gd)
    assert all(vd.sets[i] <= qh[i] for i in vd.sets)


def test_bad_time_arguments():
    with pytest.raises(ValueError):
        u_sets(IDX6, 3, 2)
    with pytest.raises(TypeError):
        value_dependency((IDX6, IDX6))


def test_analyze_records():
    recs = analyze(fixture("six_agent"), kappa=1).records()
    assert recs[0]["I_Q"] == [1, 2] and recs[0]["kappa"] == 1
    assert recs[2]["I_GD"] == [3, 4] and recs[2]["I_Qhat"] == list(range(1, 7))
