"""Exact binary labeling by min-cut, and the alpha-beta swap / alpha-expansion movers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError
from ..mixture import MixtureModel, ResponsibilityStack, map_labeling
from ..volume import GridGeometry, LabelMap, MultichannelVolume, flatten
from .maxflow import FlowGraph, max_flow
from .model import (
    DEFAULT_COST_CAP,
    EnergyBreakdown,
    LabelingProblem,
    NeighborhoodSystem,
    PairGraph,
    TransitionModel,
)

__all__ = [
    "MoveLog",
    "solve_binary",
    "binary_cut",
    "alpha_beta_swap",
    "alpha_expansion",
    "data_costs",
    "data_costs_from_model",
    "regularize",
]

log = logging.getLogger(__name__)

# relative margin an energy must drop by for a move to count as an improvement
IMPROVEMENT_RTOL = 1e-12


@dataclass
class MoveLog:
    moves: list = field(default_factory=list)
    sweeps: int = 0
    clamped: int = 0

    @property
    def accepted(self) -> list:
        return [m for m in self.moves if m["accepted"]]

    def as_dict(self) -> dict:
        return {"sweeps": self.sweeps, "clamped": self.clamped, "moves": list(self.moves)}


def solve_binary(ua, ub, first, second, A, B, C, D, truncate: bool = False):
    """Minimize ``sum ua/ub + sum pair(A, B, C, D)`` over a two-label field.

    Pair ``p`` costs ``A[p]`` when both ends take label a, ``B[p]`` for
    ``(a, b)``, ``C[p]`` for ``(b, a)`` and ``D[p]`` for ``(b, b)``. Returns
    ``(is_b, n_clamped)``. Non-submodular pairs (``B + C < A + D``) raise
    unless ``truncate`` is set, in which case ``A`` is lowered to make them
    submodular and the count is returned.
    """
    n = ua.size
    ca = np.asarray(ua, dtype=np.float64).copy()
    cb = np.asarray(ub, dtype=np.float64).copy()
    A = np.asarray(A, dtype=np.float64)
    scale = max(1.0, float(np.abs(A).max(initial=0)), float(np.abs(B).max(initial=0)))
    weight = B + C - A - D
    bad = weight < -1e-12 * scale
    clamped = int(bad.sum())
    if clamped:
        if not truncate:
            raise InputError(f"{clamped} non-submodular pair terms")
        A = np.where(bad, B + C - D, A)
        weight = np.where(bad, 0.0, weight)
    weight = np.maximum(weight, 0.0)
    # E = A + (C - A)[x_i = b] + (D - C)[x_j = b] + (B + C - A - D)[x_i = a, x_j = b]
    cb += np.bincount(first, weights=C - A, minlength=n)
    cb += np.bincount(second, weights=D - C, minlength=n)
    low = np.minimum(ca, cb)
    ca -= low
    cb -= low
    s, t = n, n + 1
    nodes = np.arange(n)
    src = cb > 0
    snk = ca > 0
    live = weight > 0
    tail = np.concatenate([np.full(src.sum(), s), nodes[snk], first[live]])
    head = np.concatenate([nodes[src], np.full(snk.sum(), t), second[live]])
    cap = np.concatenate([cb[src], ca[snk], weight[live]])
    g = FlowGraph(n + 2, s, t, tail, head, cap, np.zeros(cap.size))
    _, source_side = max_flow(g)
    return ~source_side[:n], clamped


def _labels_to_nodes(labels: LabelMap) -> np.ndarray:
    return flatten(labels.labels)[np.flatnonzero(flatten(labels.mask))] - 1


def _nodes_to_labels(x: np.ndarray, like: LabelMap, mask=None) -> LabelMap:
    mask = like.mask if mask is None else mask
    flat = np.zeros(like.geometry.n_voxels, dtype=np.int32)
    flat[np.flatnonzero(flatten(mask))] = x + 1
    return LabelMap(like.geometry, flat, like.n_classes)


def binary_cut(
    data_costs: np.ndarray,
    tm: TransitionModel,
    ns: NeighborhoodSystem,
    geometry: GridGeometry,
    mask=None,
    truncate: bool = False,
) -> LabelMap:
    """Globally optimal two-label field (labels 1 and 2)."""
    if tm.n_labels != 2 or data_costs.shape[0] != 2:
        raise InputError("binary_cut needs exactly two labels")
    mask = np.ones(geometry.dims, bool) if mask is None else np.asarray(mask, bool)
    prob = LabelingProblem.from_volume(data_costs, mask, geometry, tm, ns)
    x = _solve_pair(prob, np.zeros(prob.graph.n_nodes, np.int64), 0, 1, truncate)[0]
    flat = np.zeros(geometry.n_voxels, dtype=np.int32)
    flat[np.flatnonzero(flatten(mask))] = x + 1
    return LabelMap(geometry, flat, 2)


def _solve_pair(prob: LabelingProblem, x: np.ndarray, alpha: int, beta: int, truncate=False):
    """Best labeling within one alpha-beta swap of ``x``."""
    g, v = prob.graph, prob.v
    active = (x == alpha) | (x == beta)
    ids = np.flatnonzero(active)
    local = np.full(x.size, -1, np.int64)
    local[ids] = np.arange(ids.size)
    ua = prob.costs[alpha, ids].copy()
    ub = prob.costs[beta, ids].copy()
    fa, fb = active[g.first], active[g.second]
    # pairs with a fixed neighbor become unary terms
    m = fa & ~fb
    w, i, xj = g.weight[m], local[g.first[m]], x[g.second[m]]
    ua += np.bincount(i, weights=w * v[alpha, xj], minlength=ids.size)
    ub += np.bincount(i, weights=w * v[beta, xj], minlength=ids.size)
    m = fb & ~fa
    w, j, xi = g.weight[m], local[g.second[m]], x[g.first[m]]
    ua += np.bincount(j, weights=w * v[xi, alpha], minlength=ids.size)
    ub += np.bincount(j, weights=w * v[xi, beta], minlength=ids.size)
    m = fa & fb
    w = g.weight[m]
    is_b, clamped = solve_binary(
        ua,
        ub,
        local[g.first[m]],
        local[g.second[m]],
        w * v[alpha, alpha],
        w * v[alpha, beta],
        w * v[beta, alpha],
        w * v[beta, beta],
        truncate,
    )
    out = x.copy()
    out[ids] = np.where(is_b, beta, alpha)
    return out, clamped


def _expand(prob: LabelingProblem, x: np.ndarray, alpha: int, truncate=False):
    """Best labeling within one alpha-expansion of ``x`` (a = keep, b = alpha)."""
    g, v = prob.graph, prob.v
    nodes = np.arange(x.size)
    ua = prob.costs[x, nodes]
    ub = prob.costs[alpha, nodes]
    xi, xj, w = x[g.first], x[g.second], g.weight
    is_b, clamped = solve_binary(
        ua,
        ub,
        g.first,
        g.second,
        w * v[xi, xj],
        w * v[xi, alpha],
        w * v[alpha, xj],
        w * v[alpha, alpha],
        truncate,
    )
    return np.where(is_b, alpha, x), clamped


def _improves(new: float, old: float) -> bool:
    return new < old - IMPROVEMENT_RTOL * max(1.0, abs(old))


def _run_mover(prob: LabelingProblem, x: np.ndarray, candidates, step, truncate, max_sweeps):
    moves = MoveLog()
    energy = prob.energy(x).total
    for sweep in range(1, max_sweeps + 1):
        moves.sweeps = sweep
        improved = False
        for cand in candidates:
            new_x, clamped = step(prob, x, *cand, truncate=truncate)
            moves.clamped += clamped
            new_energy = prob.energy(new_x).total
            accepted = _improves(new_energy, energy)
            moves.moves.append(
                {"sweep": sweep, "labels": [c + 1 for c in cand], "energy": new_energy if accepted else energy,
                 "accepted": accepted}
            )
            if accepted:
                x, energy, improved = new_x, new_energy, True
        if not improved:
            break
    else:
        log.warning("mover stopped after %d sweeps without reaching a fixed point", max_sweeps)
    return x, moves


def _check_init(init: LabelMap, data_costs: np.ndarray, tm: TransitionModel):
    k = tm.n_labels
    if data_costs.shape[0] != k:
        raise InputError("data costs and transition matrix disagree on K")
    if init.n_classes > k:
        raise InputError("initial labeling uses more labels than the model")


def alpha_beta_swap(
    init: LabelMap,
    data_costs: np.ndarray,
    tm: TransitionModel,
    ns: NeighborhoodSystem,
    truncate: bool = False,
    max_sweeps: int = 100,
):
    """Swap moves over label pairs in lexicographic order until a sweep fails to improve.

    Returns ``(labels, energy, move_log)``.
    """
    _check_init(init, data_costs, tm)
    if tm.classification == "non-metric" and not truncate:
        raise InputError("alpha-beta swap needs a semi-metric transition model (got non-metric)")
    prob = LabelingProblem.from_volume(data_costs, init.mask, init.geometry, tm, ns)
    k = tm.n_labels
    pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
    x, moves = _run_mover(prob, _labels_to_nodes(init), pairs, _solve_pair, truncate, max_sweeps)
    out = LabelMap(init.geometry, _nodes_to_labels(x, init).labels, k)
    return out, prob.energy(x), moves


def alpha_expansion(
    init: LabelMap,
    data_costs: np.ndarray,
    tm: TransitionModel,
    ns: NeighborhoodSystem,
    truncate: bool = False,
    max_sweeps: int = 100,
):
    """Expansion moves over labels in ascending order until a sweep fails to improve.

    Needs a metric transition model; with ``truncate`` other models are
    accepted and violating pair terms are clamped (the result is then only
    approximate, see ``move_log.clamped``).
    """
    _check_init(init, data_costs, tm)
    cls = tm.classification
    if cls != "metric" and not truncate:
        raise InputError(f"alpha-expansion needs a metric transition model (got {cls})")
    prob = LabelingProblem.from_volume(data_costs, init.mask, init.geometry, tm, ns)
    labels = [(a,) for a in range(tm.n_labels)]
    x, moves = _run_mover(prob, _labels_to_nodes(init), labels, _expand, truncate, max_sweeps)
    out = LabelMap(init.geometry, _nodes_to_labels(x, init).labels, tm.n_labels)
    return out, prob.energy(x), moves


def data_costs(resp: ResponsibilityStack, cap: float = DEFAULT_COST_CAP) -> np.ndarray:
    """``-log gamma`` capped at ``cap``; zero outside the mask.

    Differs from ``-log(pi_k N(y | theta_k))`` only by a per-voxel constant,
    so both yield the same minimizers.
    """
    with np.errstate(divide="ignore"):
        costs = np.minimum(-np.log(resp.maps), cap)
    costs[:, ~resp.mask] = 0.0
    return costs


def data_costs_from_model(model: MixtureModel, mv: MultichannelVolume, cap: float = DEFAULT_COST_CAP) -> np.ndarray:
    """``-log(pi_k N(y_i | theta_k))`` capped at ``cap``; zero outside the mask."""
    from ..mixture import log_joint

    lj = log_joint(model, mv.features(), model.masked_priors(mv))
    return mv.scatter(np.minimum(-lj, cap))


def regularize(
    resp: ResponsibilityStack,
    model: MixtureModel,
    tm: TransitionModel,
    ns: NeighborhoodSystem,
    mover: str = "swap",
    cap: float = DEFAULT_COST_CAP,
    truncate: bool = False,
    return_log: bool = False,
):
    """MRF-regularized hard labels starting from the MAP labeling."""
    if tm.n_labels != model.n_components or resp.n_classes != model.n_components:
        raise InputError("transition model, responsibilities and mixture disagree on K")
    init = map_labeling(resp)
    if tm.lam == 0:
        result = (init, None, MoveLog())
    else:
        costs = data_costs(resp, cap)
        if mover == "swap":
            result = alpha_beta_swap(init, costs, tm, ns, truncate)
        elif mover == "expansion":
            result = alpha_expansion(init, costs, tm, ns, truncate)
        else:
            raise InputError(f"unknown mover {mover!r}")
    return result if return_log else result[0]
