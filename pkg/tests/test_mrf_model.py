import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_pairs, loop_energy
from mvseg.errors import InputError
from mvseg.mrf import (
    NeighborhoodSystem,
    PairGraph,
    TransitionModel,
    load_transition,
    mrf_priors,
    potts_delta,
    total_energy,
)
from mvseg.volume import GridGeometry, LabelMap


def test_potts_delta_table():
    assert potts_delta(2, 2) == 1
    assert potts_delta(1, 3) == 0
    table = np.array([[potts_delta(a, b) for b in (1, 2, 3)] for a in (1, 2, 3)])
    assert np.array_equal(table, np.eye(3, dtype=int))
    assert np.array_equal(TransitionModel.potts(3).penalties, 1 - table)


@pytest.mark.parametrize("kind", [6, 18, 26])
def test_pair_graph_matches_loop_enumeration(kind):
    geom = GridGeometry((3, 4, 2))
    g = PairGraph.build(geom, np.ones(geom.dims, bool), NeighborhoodSystem(kind))
    got = sorted(zip(g.first.tolist(), g.second.tolist()))
    assert got == grid_pairs(geom.dims, kind)
    assert np.all(g.first < g.second)


def test_distance_weighting_face_unit():
    ns = NeighborhoodSystem(26, distance_weighting=True)
    sp = (1.0, 1.0, 2.0)
    assert ns.weight((1, 0, 0), sp) == 1.0
    assert ns.weight((0, 0, 1), sp) == pytest.approx(0.5)
    assert ns.weight((1, 1, 1), sp) == pytest.approx(1 / np.sqrt(6))


def test_neighborhood_rejects_unknown_kind():
    with pytest.raises(InputError):
        NeighborhoodSystem(8)


def test_transition_classification():
    assert TransitionModel.potts(3).classification == "metric"
    semi = np.array([[0, 1, 4], [1, 0, 1], [4, 1, 0]], float)
    assert TransitionModel(semi).classification == "semi-metric"
    asym = np.array([[0, 1], [2, 0]], float)
    assert TransitionModel(asym).classification == "non-metric"
    zero_off = np.array([[0, 0], [0, 0]], float)
    assert TransitionModel(zero_off).classification == "non-metric"
    io = TransitionModel.inner_outer([1, 1, 2], 0.5, 1.0)
    assert io.penalties[0, 1] == 0.5 and io.penalties[0, 2] == 1.0
    assert io.classification == "metric"


def test_transition_validation(tmp_path):
    with pytest.raises(InputError):
        TransitionModel(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(InputError):
        TransitionModel(np.array([[0.0, -1.0], [1.0, 0.0]]))
    with pytest.raises(InputError):
        TransitionModel(np.zeros((2, 3)))
    p = tmp_path / "v.txt"
    p.write_text("# penalties\n0 1 2\n1 0 1\n2 1 0\n")
    tm = load_transition(p, lam=0.3)
    assert tm.lam == 0.3 and tm.penalties[0, 2] == 2.0
    with pytest.raises(InputError):
        load_transition(tmp_path / "missing.txt")


def test_priors_lambda_zero_uniform(rng):
    geom = GridGeometry((4, 4, 3))
    labels = LabelMap(geom, rng.integers(1, 4, geom.dims), 3)
    pi = mrf_priors(labels, TransitionModel.potts(3, 0.0), NeighborhoodSystem(6))
    assert np.allclose(pi, 1 / 3)


def test_priors_six_neighbors_softmax_oracle():
    geom = GridGeometry((3, 3, 3))
    lab = np.full(geom.dims, 2)
    lab[1, 1, 1] = 1
    pi = mrf_priors(LabelMap(geom, lab, 3), TransitionModel.potts(3, 0.6), NeighborhoodSystem(6))
    expo = np.array([-0.3 * 6, 0.0, -0.3 * 6])
    want = np.exp(expo) / np.exp(expo).sum()
    assert np.allclose(pi[:, 1, 1, 1], want, atol=1e-15)
    assert np.argmax(pi[:, 1, 1, 1]) == 1


def test_priors_balanced_neighbors_uniform():
    geom = GridGeometry((3, 3, 3))
    lab = np.full(geom.dims, 1)
    for off in ((2, 1, 1), (1, 2, 1), (1, 1, 2)):
        lab[off] = 2
    for centre in (1, 2):
        lab[1, 1, 1] = centre
        pi = mrf_priors(LabelMap(geom, lab, 2), TransitionModel.potts(2, 0.6), NeighborhoodSystem(6))
        # three face neighbors of each label leave the voxel undecided
        assert np.allclose(pi[:, 1, 1, 1], 0.5, atol=1e-15)


def test_priors_external_field_shift_invariant(rng):
    geom = GridGeometry((5, 4, 3))
    labels = LabelMap(geom, rng.integers(1, 4, geom.dims), 3)
    tm, ns = TransitionModel.potts(3, 0.8), NeighborhoodSystem(18)
    field = rng.normal(size=3)
    a = mrf_priors(labels, tm, ns, field)
    b = mrf_priors(labels, tm, ns, field + 123.4)
    assert np.allclose(a, b, atol=1e-14)
    assert np.allclose(a.sum(axis=0), 1.0)


def test_priors_zero_outside_mask(rng):
    geom = GridGeometry((4, 4, 2))
    lab = rng.integers(1, 3, geom.dims)
    lab[0] = 0
    pi = mrf_priors(LabelMap(geom, lab, 2), TransitionModel.potts(2), NeighborhoodSystem(6))
    assert np.all(pi[:, 0] == 0)
    assert np.allclose(pi[:, 1:].sum(axis=0), 1.0)


def test_energy_uniform_and_single_pair():
    geom = GridGeometry((3, 3, 2))
    ns = NeighborhoodSystem(6)
    costs = np.zeros((2,) + geom.dims)
    e = total_energy(LabelMap(geom, np.ones(geom.dims, int), 2), costs, TransitionModel.potts(2, 1.0), ns)
    assert e.smooth_term == 0.0
    g2 = GridGeometry((2, 1, 1))
    e = total_energy(
        LabelMap(g2, np.array([1, 2]).reshape(2, 1, 1), 2), np.zeros((2, 2, 1, 1)), TransitionModel.potts(2, 1.0), ns
    )
    assert e.smooth_term == 1.0
    assert e.total == e.data_term + e.smooth_term


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([6, 18, 26]), st.floats(0, 2))
def test_energy_matches_loop_oracle(seed, kind, lam):
    rng = np.random.default_rng(seed)
    geom = GridGeometry((3, 3, 1)) if kind == 6 else GridGeometry((2, 3, 2))
    k = 3
    costs = rng.uniform(0, 5, (k,) + geom.dims)
    v = rng.uniform(0.1, 2, (k, k))
    v = v + v.T
    np.fill_diagonal(v, 0)
    lab = rng.integers(1, k + 1, geom.dims)
    e = total_energy(LabelMap(geom, lab, k), costs, TransitionModel(v, lam), NeighborhoodSystem(kind))
    x = lab.ravel(order="F") - 1
    flat = costs.reshape(k, -1, order="F")
    pairs = grid_pairs(geom.dims, kind)
    want = loop_energy(x, flat, pairs, v, lam)
    assert e.total == pytest.approx(want, rel=1e-12, abs=1e-12)
    # enumerating the reversed halves gives the same smoothness term
    rev = [(j, i) for i, j in pairs]
    assert loop_energy(x, flat, rev, v, lam) == pytest.approx(want, rel=1e-12)


def test_energy_respects_mask(rng):
    geom = GridGeometry((3, 3, 1))
    lab = rng.integers(1, 3, geom.dims)
    lab[0, 0, 0] = 0
    costs = rng.uniform(0, 1, (2,) + geom.dims)
    e = total_energy(LabelMap(geom, lab, 2), costs, TransitionModel.potts(2, 1.0), NeighborhoodSystem(6))
    x = lab.ravel(order="F")
    data = sum(costs[x[i] - 1].ravel(order="F")[i] for i in range(9) if x[i] > 0)
    smooth = sum(1.0 for i, j in grid_pairs(geom.dims) if x[i] and x[j] and x[i] != x[j])
    assert e.data_term == pytest.approx(data) and e.smooth_term == pytest.approx(smooth)
