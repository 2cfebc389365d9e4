import pytest
from hypothesis import given, settings, strategies as st

from structured_marl.coupling import CouplingGraphs, derive_index_sets, fixture
from structured_marl.mabn import (ACTION, OPTIMALITY, STATE, MabnNode, build_folded, build_full,
                                  reaches, to_dot)

from .strategies import graphs

IDX6 = derive_index_sets(fixture("six_agent"))


def test_six_agent_arc_count():
    assert len(build_full(IDX6, 3).arcs) == 174


def test_six_agent_reachability():
    g = build_full(IDX6, 1)
    assert reaches(g, MabnNode(STATE, 1, 0), MabnNode(OPTIMALITY, 3, 1))
    assert not reaches(g, MabnNode(ACTION, 1, 0), MabnNode(OPTIMALITY, 3, 1))


def test_single_agent_chain():
    g = build_full(derive_index_sets(CouplingGraphs(1)), 2)
    arcs = {(u.label(), v.label()) for u, v in g.arcs}
    assert ("s_1@0", "s_1@1") in arcs and ("a_1@1", "s_1@2") in arcs
    assert ("s_1@0", "a_1@0") in arcs and ("a_1@2", "Z_1@2") in arcs
    assert len(arcs) == 3 * 3 + 2 * 2


def test_unknown_node_rejected():
    g = build_full(IDX6, 1)
    with pytest.raises(KeyError):
        reaches(g, MabnNode(STATE, 7, 0), MabnNode(OPTIMALITY, 1, 1))


def test_negative_horizon():
    with pytest.raises(ValueError):
        build_full(IDX6, -1)


def test_mismatched_time_varying_length():
    with pytest.raises(ValueError):
        build_full((IDX6, IDX6), 3)


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=6), st.integers(0, 5))
def test_full_network_is_acyclic(g, horizon):
    assert build_full(derive_index_sets(g), horizon).is_acyclic()


@settings(max_examples=100, deadline=None)
@given(graphs(max_agents=6), st.integers(1, 5))
def test_unfold_equals_direct_build(g, horizon):
    idx = derive_index_sets(g)
    assert build_folded(idx).unfold(horizon).arcs == build_full(idx, horizon).arcs


def test_folded_marks_every_self_state_edge():
    f = build_folded(IDX6)
    assert f.bidirectional == frozenset(range(1, 7))
    assert not any(u.kind == STATE and v.kind == STATE and u.agent == v.agent
                   for u, v in f.arcs)


def test_dot_output():
    text = to_dot(build_full(derive_index_sets(CouplingGraphs(1)), 1))
    assert text.startswith("digraph") and '"s_1@0" -> "s_1@1";' in text
