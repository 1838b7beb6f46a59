import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import exhaustive_min_cut
from mvseg.errors import InputError
from mvseg.mrf import FlowGraph, cut_capacity, max_flow


def test_single_arc():
    flow, side = max_flow(FlowGraph.from_edges(2, 0, 1, [(0, 1, 5.0)]))
    assert flow == 5.0
    assert side.tolist() == [True, False]


def test_diamond():
    s, a, b, t = 0, 1, 2, 3
    g = FlowGraph.from_edges(4, s, t, [(s, a, 3), (s, b, 2), (a, t, 2), (b, t, 3), (a, b, 1)])
    flow, side = max_flow(g)
    assert flow == 5.0
    assert cut_capacity(g, side) == 5.0


def test_reverse_capacity_is_used():
    # the only route from s to t runs backwards along an edge stored as (t, s)
    g = FlowGraph.from_edges(2, 0, 1, [(1, 0, 0.0, 4.0)])
    assert max_flow(g)[0] == 4.0


def test_disconnected_nodes_sink_side():
    g = FlowGraph.from_edges(5, 0, 1, [(0, 1, 1.0), (3, 4, 2.0)])
    flow, side = max_flow(g)
    assert flow == 1.0
    assert side.tolist() == [True, False, False, False, False]


def test_empty_graph():
    flow, side = max_flow(FlowGraph.from_edges(3, 0, 2, []))
    assert flow == 0.0 and side.tolist() == [True, False, False]


def test_validation():
    with pytest.raises(InputError):
        FlowGraph.from_edges(2, 0, 0, [(0, 1, 1.0)])
    with pytest.raises(InputError):
        FlowGraph.from_edges(2, 0, 1, [(0, 1, -1.0)])
    with pytest.raises(InputError):
        FlowGraph.from_edges(2, 0, 1, [(0, 2, 1.0)])


def random_graph(rng, n_inner):
    n = n_inner + 2
    edges = []
    for u in range(n):
        for v in range(n):
            if u != v and v != 0 and u != 1 and rng.random() < 0.35:
                edges.append((u, v, float(rng.integers(0, 10)) if rng.random() < 0.5 else rng.uniform(0, 10)))
    return n, edges


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 10))
def test_random_graphs_match_exhaustive_cut(seed, n_inner):
    rng = np.random.default_rng(seed)
    n, edges = random_graph(rng, n_inner)
    g = FlowGraph.from_edges(n, 0, 1, edges)
    flow, side = max_flow(g)
    best = exhaustive_min_cut(n, 0, 1, edges)
    assert flow == pytest.approx(best, rel=1e-12, abs=1e-12)
    assert cut_capacity(g, side) == pytest.approx(flow, rel=1e-12, abs=1e-12)
    assert side[0] and not side[1]


def test_deterministic():
    rng = np.random.default_rng(3)
    n, edges = random_graph(rng, 12)
    g = FlowGraph.from_edges(n, 0, 1, edges)
    a, b = max_flow(g), max_flow(g)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
