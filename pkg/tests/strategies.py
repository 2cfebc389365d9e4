from hypothesis import strategies as st

from structured_marl.coupling import CouplingGraphs


@st.composite
def graphs(draw, max_agents=8, min_agents=1):
    n = draw(st.integers(min_agents, max_agents))
    pairs = [(j, i) for j in range(1, n + 1) for i in range(1, n + 1) if j != i]
    pick = st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs)) if pairs \
        else st.just([])
    return CouplingGraphs(n, draw(pick), draw(pick), draw(pick))
