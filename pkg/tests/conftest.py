"""Shared brute-force oracles and fixtures.

The oracles deliberately avoid the package's own code paths: labelings are
enumerated exhaustively, cuts by subset enumeration, energies by plain loops.
"""
import itertools

import numpy as np
import pytest

from mvseg.volume import GridGeometry


def grid_pairs(dims, kind=6):
    """Neighbor pairs ``(i, j)`` with ``i < j`` by nested loops over voxel
    coordinates; linear index is x-fastest."""
    nx, ny, nz = dims
    order = {6: 1, 18: 2, 26: 3}[kind]
    lin = lambda x, y, z: x + nx * (y + ny * z)
    pairs = set()
    for x, y, z in itertools.product(range(nx), range(ny), range(nz)):
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            nnz = abs(dx) + abs(dy) + abs(dz)
            if nnz == 0 or nnz > order:
                continue
            u, v, w = x + dx, y + dy, z + dz
            if 0 <= u < nx and 0 <= v < ny and 0 <= w < nz:
                a, b = lin(x, y, z), lin(u, v, w)
                pairs.add((min(a, b), max(a, b)))
    return sorted(pairs)


def loop_energy(x, costs, pairs, v, lam):
    """Data plus smoothness energy by a double loop; ``x`` 0-based labels."""
    data = 0.0
    for i, xi in enumerate(x):
        data += costs[xi, i]
    smooth = 0.0
    for i, j in pairs:
        smooth += v[x[i], x[j]]
    return data + lam * smooth


def exhaustive_labelings(costs, pairs, v, lam):
    """All K**n energies, vectorized; returns ``(labelings, energies)``."""
    k, n = costs.shape
    labs = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64)
    e = costs[labs, np.arange(n)].sum(axis=1)
    if pairs:
        p = np.array(pairs)
        e = e + lam * v[labs[:, p[:, 0]], labs[:, p[:, 1]]].sum(axis=1)
    return labs, e


def exhaustive_min_cut(n, s, t, arcs):
    """Minimum s-t cut over every node subset; ``arcs`` are ``(u, v, cap)``."""
    others = [i for i in range(n) if i not in (s, t)]
    best = np.inf
    for mask in range(1 << len(others)):
        side = {s} | {others[b] for b in range(len(others)) if mask >> b & 1}
        cut = sum(c for u, v, c in arcs if u in side and v not in side)
        best = min(best, cut)
    return best


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def small_geometry():
    return GridGeometry((4, 3, 2), (1.0, 1.5, 2.0), (-3.0, 4.0, 0.5))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
