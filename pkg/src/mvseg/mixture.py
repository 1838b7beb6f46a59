"""Mixtures of multivariate normals: densities, posteriors, MAP and initialization."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import InputError, NumericalError
from .volume import GridGeometry, LabelMap, MultichannelVolume, ScalarVolume, flatten

__all__ = [
    "NormalComponent",
    "MixtureModel",
    "ResponsibilityStack",
    "floor_covariance",
    "log_density",
    "component_density",
    "mahalanobis_sq",
    "log_joint",
    "compute_posteriors",
    "log_likelihood",
    "map_labeling",
    "kmeans",
    "init_kmeans",
    "init_manual",
    "init_from_priors",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_FLOOR = 1e-6


def floor_covariance(cov, eps: float = DEFAULT_FLOOR) -> np.ndarray:
    """Symmetrize ``cov`` and make it positive definite.

    When the Cholesky factorization fails, ``eps * trace / C`` (``eps`` for a
    zero-trace matrix) is added to the diagonal; the amount grows tenfold on
    each further failure.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1]:
        raise InputError(f"covariance must be square, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise NumericalError("non-finite covariance")
    scale = max(np.abs(cov).max(), np.finfo(float).tiny)
    if np.abs(cov - cov.T).max() > 1e-12 * scale:
        raise InputError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    c = cov.shape[0]
    trace = float(np.trace(cov))
    step = eps * (trace / c if trace > 0 else 1.0)
    out = cov
    for _ in range(8):
        try:
            np.linalg.cholesky(out)
            return out
        except np.linalg.LinAlgError:
            if step <= 0:
                break
            out = cov + step * np.eye(c)
            step *= 10.0
    raise NumericalError("covariance is not positive definite after flooring")


@dataclass(frozen=True)
class NormalComponent:
    mean: np.ndarray
    covariance: np.ndarray
    tissue_id: int = 0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).copy()
        cov = floor_covariance(self.covariance)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise InputError("mean/covariance dimension mismatch")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "tissue_id", int(self.tissue_id))

    @property
    def n_channels(self) -> int:
        return self.mean.size

    @property
    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.covariance)


def mahalanobis_sq(comp: NormalComponent, y) -> np.ndarray:
    """Squared Mahalanobis distance of ``y`` (``(C,)`` or ``(n, C)``) to ``comp``."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    diff = np.atleast_2d(y) - comp.mean
    z = linalg.solve_triangular(comp.cholesky, diff.T, lower=True, check_finite=False)
    d2 = np.sum(z * z, axis=0)
    return d2[0] if single else d2


def log_density(comp: NormalComponent, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    chol = comp.cholesky
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (comp.n_channels * LOG_2PI + logdet + mahalanobis_sq(comp, y))


def component_density(comp: NormalComponent, y) -> float:
    """Multivariate normal density ``N(y | mean, covariance)``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != comp.mean.shape:
        raise InputError("feature vector length does not match component")
    return float(np.exp(log_density(comp, y)))


@dataclass(frozen=True)
class MixtureModel:
    """K normal components with either global (K,) or per-voxel (K, X, Y, Z) priors."""

    components: tuple[NormalComponent, ...]
    priors: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InputError("a mixture needs at least one component")
        c = comps[0].n_channels
        if any(k.n_channels != c for k in comps):
            raise InputError("all components must share the channel count")
        priors = np.array(self.priors, dtype=np.float64, copy=True)
        if priors.shape[0] != len(comps) or priors.ndim not in (1, 4):
            raise InputError("priors must have shape (K,) or (K, X, Y, Z)")
        if np.any(priors < 0) or not np.all(np.isfinite(priors)):
            raise InputError("priors must be finite and non-negative")
        if priors.ndim == 1:
            total = priors.sum()
            if total <= 0:
                raise InputError("priors sum to zero")
            priors = priors / total
        priors.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "priors", priors)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def n_channels(self) -> int:
        return self.components[0].n_channels

    @property
    def per_voxel(self) -> bool:
        return self.priors.ndim == 4

    @property
    def means(self) -> np.ndarray:
        return np.stack([k.mean for k in self.components])

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([k.covariance for k in self.components])

    @property
    def tissue_ids(self) -> tuple[int, ...]:
        return tuple(k.tissue_id for k in self.components)

    def masked_priors(self, mv: MultichannelVolume) -> np.ndarray:
        """Priors at in-mask voxels, shape ``(K, n_masked)``."""
        if not self.per_voxel:
            return np.repeat(self.priors[:, None], mv.n_masked, axis=1)
        if self.priors.shape[1:] != mv.geometry.dims:
            raise InputError("per-voxel priors do not match the volume geometry")
        return flatten(self.priors)[:, mv.mask_index]

    def with_components(self, comps: Sequence[NormalComponent], priors=None) -> "MixtureModel":
        return MixtureModel(tuple(comps), self.priors if priors is None else priors)


@dataclass(frozen=True)
class ResponsibilityStack:
    """Per-class posterior maps; zero outside the mask, summing to one inside."""

    geometry: GridGeometry
    maps: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        maps = np.array(self.maps, dtype=np.float64, copy=True)
        mask = np.array(self.mask, dtype=bool, copy=True)
        if maps.ndim != 4 or maps.shape[1:] != self.geometry.dims or mask.shape != self.geometry.dims:
            raise InputError("responsibility maps do not match geometry")
        if np.any(maps < -1e-12) or np.any(maps > 1 + 1e-9):
            raise InputError("responsibilities must lie in [0, 1]")
        if np.any(maps[:, ~mask] != 0):
            raise InputError("responsibilities must be zero outside the mask")
        sums = maps[:, mask].sum(axis=0)
        if sums.size and np.abs(sums - 1).max() > 1e-6:
            raise InputError("responsibilities do not sum to one inside the mask")
        maps.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "mask", mask)

    @property
    def n_classes(self) -> int:
        return self.maps.shape[0]

    def masked(self) -> np.ndarray:
        """In-mask values, shape ``(K, n_masked)`` in x-fastest order."""
        return flatten(self.maps)[:, np.flatnonzero(flatten(self.mask))]

    def volume(self, k: int) -> ScalarVolume:
        return ScalarVolume(self.geometry, self.maps[k])

    @classmethod
    def from_masked(cls, mv: MultichannelVolume, gamma: np.ndarray) -> "ResponsibilityStack":
        return cls(mv.geometry, mv.scatter(gamma), mv.mask_array)


def log_joint(model: MixtureModel, feats: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """``log(pi_k * N(y_i | theta_k))`` for every class and feature row, shape ``(K, n)``."""
    dens = np.stack([log_density(k, feats) for k in model.components])
    with np.errstate(divide="ignore"):
        return dens + np.log(priors)


def _posteriors(model: MixtureModel, mv: MultichannelVolume):
    if model.n_channels != mv.n_channels:
        raise InputError(
            f"model has {model.n_channels} channels, volume has {mv.n_channels}"
        )
    lj = log_joint(model, mv.features(), model.masked_priors(mv))
    norm = logsumexp(lj, axis=0)
    if np.any(~np.isfinite(norm)):
        raise NumericalError("all priors are zero at an in-mask voxel")
    return np.exp(lj - norm), norm


def compute_posteriors(model: MixtureModel, mv: MultichannelVolume) -> ResponsibilityStack:
    """Bayes rule per voxel, evaluated in log space with max subtraction."""
    gamma, _ = _posteriors(model, mv)
    return ResponsibilityStack.from_masked(mv, gamma)


def log_likelihood(model: MixtureModel, mv: MultichannelVolume) -> float:
    """Observed-data log-likelihood summed over in-mask voxels."""
    _, norm = _posteriors(model, mv)
    return float(np.sum(norm))


def map_labeling(resp: ResponsibilityStack) -> LabelMap:
    """Hard labels ``1..K`` by maximum posterior; ties go to the lowest class."""
    labels = np.argmax(resp.maps, axis=0).astype(np.int32) + 1
    labels[~resp.mask] = 0
    return LabelMap(resp.geometry, labels, resp.n_classes)


def _distinct_rows(x: np.ndarray) -> int:
    return np.unique(x, axis=0).shape[0]


def _kmeanspp_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(np.argmax(d2))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd's algorithm from k-means++ seeding.

    Returns ``(centers, assignment, n_iter)``. Stops at the assignment fixed
    point. An empty cluster is re-seeded at the point furthest from its center.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if _distinct_rows(x) < k:
        raise InputError(f"fewer than {k} distinct feature vectors")
    rng = np.random.Generator(np.random.Philox(seed))
    centers = _kmeanspp_seeds(x, k, rng)
    assign = None
    for it in range(1, max_iter + 1):
        d2 = np.stack([np.sum((x - c) ** 2, axis=1) for c in centers])
        new = np.argmin(d2, axis=0)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[assign, np.arange(x.shape[0])]))
                centers[j] = x[far]
                assign[far] = j
    return centers, assign, it


def _weighted_moments(x: np.ndarray, w: np.ndarray):
    """Weighted mean and (maximum-likelihood) covariance; reductions avoid BLAS."""
    total = w.sum()
    mean = (w[:, None] * x).sum(axis=0) / total
    d = x - mean
    cov = (w[:, None, None] * d[:, :, None] * d[:, None, :]).sum(axis=0) / total
    return mean, cov


def _sorted_model(comps: list[NormalComponent], priors: np.ndarray) -> MixtureModel:
    # ascending first-channel mean (later channels break ties) keeps identifiers stable
    means = np.stack([c.mean for c in comps])
    order = np.lexsort(means.T[::-1])
    return MixtureModel(tuple(comps[i] for i in order), priors[order])


def init_kmeans(mv: MultichannelVolume, k: int, seed: int = 0, eps: float = DEFAULT_FLOOR) -> MixtureModel:
    """k-means initialization: cluster means, covariances and fractions."""
    feats = mv.features()
    _, assign, _ = kmeans(feats, k, seed)
    comps, counts = [], []
    for j in range(k):
        members = feats[assign == j]
        mean, cov = _weighted_moments(members, np.ones(len(members)))
        comps.append(NormalComponent(mean, floor_covariance(cov, eps)))
        counts.append(len(members))
    return _sorted_model(comps, np.asarray(counts, dtype=np.float64))


def init_manual(params: Iterable, eps: float = DEFAULT_FLOOR) -> MixtureModel:
    """Model from explicit ``(mean, covariance, prior[, tissue_id])`` entries."""
    comps, priors = [], []
    for entry in params:
        mean, cov, prior = entry[:3]
        tissue = entry[3] if len(entry) > 3 else 0
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise InputError("mean/covariance dimension mismatch")
        comps.append(NormalComponent(mean, floor_covariance(cov, eps), tissue))
        priors.append(float(prior))
    if not comps:
        raise InputError("no components given")
    if len({c.n_channels for c in comps}) != 1:
        raise InputError("components disagree on the channel count")
    return MixtureModel(tuple(comps), np.asarray(priors))


def init_from_priors(mv: MultichannelVolume, tpms: Sequence, eps: float = DEFAULT_FLOOR) -> MixtureModel:
    """Weighted moments per class from prior probability maps.

    The maps are used once; the returned model carries only the global
    proportions they imply.
    """
    maps = []
    for t in tpms:
        arr = t.values if isinstance(t, ScalarVolume) else np.asarray(t, dtype=np.float64)
        if arr.shape != mv.geometry.dims:
            raise InputError("prior map geometry differs from the volume")
        maps.append(flatten(arr)[mv.mask_index])
    w = np.stack(maps)
    if np.any(w < 0):
        raise InputError("prior maps must be non-negative")
    sums = w.sum(axis=0)
    if np.any(sums <= 0) or np.any(sums > 1 + 1e-3):
        raise InputError("prior maps must sum to a value in (0, 1] at every in-mask voxel")
    feats = mv.features()
    comps, totals = [], []
    for j, wk in enumerate(w):
        if wk.sum() <= 0:
            raise InputError(f"empty class {j + 1}")
        mean, cov = _weighted_moments(feats, wk)
        comps.append(NormalComponent(mean, floor_covariance(cov, eps)))
        totals.append(wk.sum())
    return MixtureModel(tuple(comps), np.asarray(totals))


def model_to_dict(model: MixtureModel) -> dict:
    priors = model.priors if not model.per_voxel else np.full(model.n_components, 1.0 / model.n_components)
    return {
        "C": model.n_channels,
        "K": model.n_components,
        "components": [
            {
                "mean": c.mean.tolist(),
                "covariance": c.covariance.tolist(),
                "prior": float(p),
                "tissue_id": c.tissue_id,
            }
            for c, p in zip(model.components, priors)
        ],
    }


def model_from_dict(doc: dict, eps: float = DEFAULT_FLOOR) -> MixtureModel:
    try:
        entries = [
            (c["mean"], c["covariance"], c.get("prior", 1.0), c.get("tissue_id", 0))
            for c in doc["components"]
        ]
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed model document: {exc}") from exc
    model = init_manual(entries, eps)
    if "C" in doc and int(doc["C"]) != model.n_channels:
        raise InputError("model C does not match component means")
    if "K" in doc and int(doc["K"]) != model.n_components:
        raise InputError("model K does not match the component list")
    return model


def save_model(model: MixtureModel, path) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)


def load_model(path, eps: float = DEFAULT_FLOOR) -> MixtureModel:
    try:
        with open(os.fspath(path)) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read model file {os.fspath(path)}: {exc}") from exc
    return model_from_dict(doc, eps)
