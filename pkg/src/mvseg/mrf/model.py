"""Neighborhood systems, transition penalties, MRF prior fields and labeling energies."""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import InputError
from ..volume import GridGeometry, LabelMap, flatten

__all__ = [
    "NeighborhoodSystem",
    "TransitionModel",
    "EnergyBreakdown",
    "PairGraph",
    "potts_delta",
    "load_transition",
    "mrf_priors",
    "total_energy",
    "DEFAULT_COST_CAP",
]

DEFAULT_COST_CAP = 50.0


@dataclass(frozen=True)
class NeighborhoodSystem:
    """Face (6), edge (18) or corner (26) connectivity, optionally distance weighted."""

    kind: int = 6
    distance_weighting: bool = False

    def __post_init__(self):
        if self.kind not in (6, 18, 26):
            raise InputError("neighborhood must be 6, 18 or 26")

    def offsets(self) -> list[tuple[int, int, int]]:
        """One offset per neighbor pair: the half whose first non-zero entry is positive."""
        order = {6: 1, 18: 2, 26: 3}[self.kind]
        half = []
        for o in itertools.product((-1, 0, 1), repeat=3):
            nz = [v for v in o if v]
            if not nz or len(nz) > order or nz[0] < 0:
                continue
            half.append(o)
        half.sort(key=lambda o: (sum(map(abs, o)), [-v for v in o]))
        return half

    def weight(self, offset, spacing) -> float:
        if not self.distance_weighting:
            return 1.0
        dist = float(np.linalg.norm(np.asarray(offset) * np.asarray(spacing)))
        return min(spacing) / dist


@dataclass(frozen=True)
class PairGraph:
    """Neighbor pairs between in-mask voxels, as node ids into the mask index."""

    n_nodes: int
    first: np.ndarray
    second: np.ndarray
    weight: np.ndarray

    @classmethod
    def build(cls, geometry: GridGeometry, mask: np.ndarray, ns: NeighborhoodSystem) -> "PairGraph":
        mask = np.asarray(mask, dtype=bool)
        node = np.full(geometry.n_voxels, -1, dtype=np.int64)
        idx = np.flatnonzero(flatten(mask))
        node[idx] = np.arange(idx.size)
        node = node.reshape(geometry.dims, order="F")
        firsts, seconds, weights = [], [], []
        for off in ns.offsets():
            src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, geometry.dims))
            dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, geometry.dims))
            a = flatten(node[src])
            b = flatten(node[dst])
            keep = (a >= 0) & (b >= 0)
            a, b = a[keep], b[keep]
            # the lower linear index always comes first
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            firsts.append(lo)
            seconds.append(hi)
            weights.append(np.full(lo.size, ns.weight(off, geometry.spacing)))
        return cls(
            int(idx.size),
            np.concatenate(firsts),
            np.concatenate(seconds),
            np.concatenate(weights),
        )


def potts_delta(a: int, b: int) -> int:
    """Kronecker delta of two labels: 1 when they agree, 0 otherwise."""
    return 1 if a == b else 0


@dataclass(frozen=True)
class TransitionModel:
    """Pairwise penalty matrix ``V`` (zero diagonal) and its weight ``lam``."""

    penalties: np.ndarray
    lam: float = 0.6

    def __post_init__(self):
        v = np.array(self.penalties, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise InputError("transition matrix must be square")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InputError("penalties must be finite and non-negative")
        if np.any(np.diag(v) != 0):
            raise InputError("penalty matrix diagonal must be zero")
        if not self.lam >= 0:
            raise InputError("lambda must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "penalties", v)
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def potts(cls, k: int, lam: float = 0.6) -> "TransitionModel":
        """Penalty ``1 - delta(a, b)``."""
        return cls(1.0 - np.eye(k), lam)

    @classmethod
    def inner_outer(cls, tissue_ids, inner: float, outer: float, lam: float = 0.6) -> "TransitionModel":
        """Lower penalty between components of one tissue than across tissues."""
        t = np.asarray(tissue_ids)
        v = np.where(t[:, None] == t[None, :], inner, outer).astype(float)
        np.fill_diagonal(v, 0.0)
        return cls(v, lam)

    @property
    def n_labels(self) -> int:
        return self.penalties.shape[0]

    @property
    def classification(self) -> str:
        v = self.penalties
        off = ~np.eye(self.n_labels, dtype=bool)
        if not np.allclose(v, v.T, rtol=0, atol=0) or np.any(v[off] <= 0):
            return "non-metric"
        # V[a, c] <= V[a, b] + V[b, c] for all a, b, c
        tri = v[:, None, :] <= v[:, :, None] + v[None, :, :] + 1e-12
        return "metric" if tri.all() else "semi-metric"

    def scaled(self) -> np.ndarray:
        return self.lam * self.penalties


def load_transition(path, lam: float = 0.6) -> TransitionModel:
    """Read a whitespace-separated K x K penalty matrix ('#' starts a comment)."""
    try:
        v = np.loadtxt(os.fspath(path), comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read transition matrix {os.fspath(path)}: {exc}") from exc
    return TransitionModel(v, lam)


@dataclass(frozen=True)
class EnergyBreakdown:
    data_term: float
    smooth_term: float

    @property
    def total(self) -> float:
        return self.data_term + self.smooth_term

    def as_dict(self) -> dict:
        return {"data": self.data_term, "smooth": self.smooth_term, "total": self.total}


def mrf_priors(
    labels: LabelMap,
    tm: TransitionModel,
    ns: NeighborhoodSystem,
    external_field: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-voxel label proportions induced by the neighbors' current labels.

    ``pi[k, i]`` is proportional to ``exp(V_i(k) - lam/2 * sum_j w_ij V[k, x_j])``
    where the penalty form of ``V`` makes agreeing neighbors raise ``pi``.
    ``external_field`` (shape ``(K,)``) defaults to zero. Returns
    ``(K, X, Y, Z)``, zero outside the label mask.
    """
    k = tm.n_labels
    if labels.n_classes > k:
        raise InputError("labels exceed the transition matrix size")
    mask = labels.mask
    graph = PairGraph.build(labels.geometry, mask, ns)
    x = flatten(labels.labels)[np.flatnonzero(flatten(mask))] - 1
    v = tm.penalties
    n = graph.n_nodes
    expo = np.zeros((k, n))
    half = 0.5 * tm.lam
    for cand in range(k):
        # pair (i, j) has energy V[x_i, x_j]; candidate at i meets x_j, candidate at j meets x_i
        acc = np.bincount(graph.first, weights=graph.weight * v[cand, x[graph.second]], minlength=n)
        acc += np.bincount(graph.second, weights=graph.weight * v[x[graph.first], cand], minlength=n)
        expo[cand] = -half * acc
    if external_field is not None:
        expo += np.asarray(external_field, dtype=np.float64)[:, None]
    expo -= expo.max(axis=0)
    pi = np.exp(expo)
    pi /= pi.sum(axis=0)
    out = np.zeros((k, labels.geometry.n_voxels))
    out[:, np.flatnonzero(flatten(mask))] = pi
    return out.reshape((k,) + labels.geometry.dims, order="F")


class LabelingProblem:
    """Data costs and pair structure over in-mask nodes, labels 0-based."""

    def __init__(self, costs: np.ndarray, graph: PairGraph, tm: TransitionModel):
        self.costs = np.asarray(costs, dtype=np.float64)
        self.graph = graph
        self.tm = tm
        self.v = tm.scaled()
        if self.costs.shape != (tm.n_labels, graph.n_nodes):
            raise InputError("data costs do not match labels/nodes")
        self._nodes = np.arange(graph.n_nodes)

    @classmethod
    def from_volume(cls, costs: np.ndarray, mask: np.ndarray, geometry: GridGeometry, tm, ns):
        graph = PairGraph.build(geometry, mask, ns)
        idx = np.flatnonzero(flatten(np.asarray(mask, bool)))
        flat = np.asarray(costs, dtype=np.float64).reshape(costs.shape[0], -1, order="F")
        return cls(flat[:, idx], graph, tm)

    def energy(self, x: np.ndarray) -> EnergyBreakdown:
        g = self.graph
        data = float(np.sum(self.costs[x, self._nodes]))
        smooth = float(np.sum(g.weight * self.v[x[g.first], x[g.second]]))
        return EnergyBreakdown(data, smooth)


def total_energy(
    labels: LabelMap,
    data_costs: np.ndarray,
    tm: TransitionModel,
    ns: NeighborhoodSystem,
) -> EnergyBreakdown:
    """Data term ``sum_i D_i(x_i)`` plus ``lam * sum_pairs w_ij V[x_i, x_j]``.

    ``data_costs`` has shape ``(K, X, Y, Z)`` and is used as given (callers
    cap it, see :func:`mvseg.mrf.data_costs`).
    """
    problem = LabelingProblem.from_volume(data_costs, labels.mask, labels.geometry, tm, ns)
    x = flatten(labels.labels)[np.flatnonzero(flatten(labels.mask))] - 1
    return problem.energy(x)
