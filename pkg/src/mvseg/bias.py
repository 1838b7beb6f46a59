"""Multiplicative bias field as a log-domain uniform B-spline, one per channel.

Control point ``l`` along an axis sits at ``origin + (l - 1) * spacing``. The
requested control spacing is an upper bound: the image extent is split into
``s = ceil(extent / requested)`` equal spans, so the lattice fits the domain
exactly and has ``s + 3`` points, enough for the support of the quadratic and
cubic kernels everywhere in the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError
from .mixture import MixtureModel, ResponsibilityStack
from .volume import GridGeometry, MultichannelVolume, ScalarVolume, flatten

__all__ = [
    "BiasField",
    "ResidualField",
    "bspline_kernel",
    "lattice_dims",
    "axis_basis",
    "compute_residuals",
    "fit_bspline",
    "evaluate_bias",
    "correct_channels",
    "DEFAULT_CONTROL_SPACING",
]

DEFAULT_CONTROL_SPACING = 50.0
DEFAULT_DAMPING = 1e-12
SUPPORT_FLOOR = 1e-14
REFINEMENT_STEPS = 100


def bspline_kernel(t, order: int = 3) -> np.ndarray:
    """Centered cardinal B-spline of degree ``order`` (2 or 3)."""
    a = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(a)
    if order == 3:
        inner = a < 1
        outer = (a >= 1) & (a < 2)
        out[inner] = 2.0 / 3.0 - a[inner] ** 2 + 0.5 * a[inner] ** 3
        out[outer] = (2.0 - a[outer]) ** 3 / 6.0
    elif order == 2:
        inner = a < 0.5
        outer = (a >= 0.5) & (a < 1.5)
        out[inner] = 0.75 - a[inner] ** 2
        out[outer] = 0.5 * (1.5 - a[outer]) ** 2
    else:
        raise InputError("spline order must be 2 or 3")
    return out


def lattice_dims(geometry: GridGeometry, control_spacing):
    """Lattice size and the effective (domain-fitting) spacing per axis."""
    spacing = np.broadcast_to(np.asarray(control_spacing, dtype=np.float64), (3,))
    dims, actual = [], []
    for n, vs, cs in zip(geometry.dims, geometry.spacing, spacing):
        if not cs > 0:
            raise InputError("control spacing must be positive")
        extent = (n - 1) * vs
        spans = max(1, int(math.ceil(extent / cs - 1e-9)))
        dims.append(spans + 3)
        actual.append(extent / spans if extent > 0 else float(cs))
    return tuple(dims), tuple(actual)


def axis_basis(n: int, voxel_spacing: float, control_spacing: float, n_ctrl: int, order: int) -> np.ndarray:
    """Basis matrix ``(n, n_ctrl)`` of one axis, sampled at voxel centers."""
    u = np.arange(n) * voxel_spacing / control_spacing
    pos = np.arange(n_ctrl) - 1.0
    return bspline_kernel(u[:, None] - pos[None, :], order)


@dataclass(frozen=True)
class BiasField:
    """Per-channel control lattices; coefficients live in the log domain."""

    lattice: tuple[int, int, int]
    control_spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    coefficients: tuple[np.ndarray, ...]
    order: int = 3

    def __post_init__(self):
        coefs = []
        for c in self.coefficients:
            c = np.array(c, dtype=np.float64, copy=True)
            if c.shape != tuple(self.lattice):
                raise InputError("coefficient array does not match the lattice")
            c.setflags(write=False)
            coefs.append(c)
        object.__setattr__(self, "coefficients", tuple(coefs))
        object.__setattr__(self, "lattice", tuple(int(x) for x in self.lattice))
        object.__setattr__(self, "control_spacing", tuple(float(x) for x in self.control_spacing))
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))

    @property
    def n_channels(self) -> int:
        return len(self.coefficients)

    @classmethod
    def zeros(cls, geometry: GridGeometry, n_channels: int, control_spacing=DEFAULT_CONTROL_SPACING, order=3):
        dims, spacing = lattice_dims(geometry, control_spacing)
        return cls(dims, spacing, geometry.origin, tuple(np.zeros(dims) for _ in range(n_channels)), order)

    def bases(self, geometry: GridGeometry) -> list[np.ndarray]:
        if not np.allclose(geometry.origin, self.origin, atol=1e-4):
            raise InputError("geometry origin differs from the bias lattice origin")
        mats = []
        for n, vs, cs, L in zip(geometry.dims, geometry.spacing, self.control_spacing, self.lattice):
            if (n - 1) * vs > (L - 3) * cs + 1e-6:
                raise InputError("geometry outside the lattice support")
            mats.append(axis_basis(n, vs, cs, L, self.order))
        return mats

    def shifted(self, offsets: Sequence[float]) -> "BiasField":
        """Add a constant per channel (constants are reproduced exactly by the basis)."""
        return BiasField(
            self.lattice,
            self.control_spacing,
            self.origin,
            tuple(c + o for c, o in zip(self.coefficients, offsets)),
            self.order,
        )

    def to_dict(self) -> dict:
        return {
            "lattice": list(self.lattice),
            "control_spacing": list(self.control_spacing),
            "origin": list(self.origin),
            "order": self.order,
            "coefficients": [flatten(c).tolist() for c in self.coefficients],
            "coefficient_order": "x-fastest",
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BiasField":
        dims = tuple(doc["lattice"])
        coefs = [np.asarray(c, float).reshape(dims, order="F") for c in doc["coefficients"]]
        return cls(dims, tuple(doc["control_spacing"]), tuple(doc["origin"]), tuple(coefs), int(doc.get("order", 3)))


@dataclass(frozen=True)
class ResidualField:
    geometry: GridGeometry
    residuals: np.ndarray  # (C, X, Y, Z)
    weights: np.ndarray  # (X, Y, Z), zero outside the mask

    def __post_init__(self):
        if self.residuals.shape[1:] != self.geometry.dims or self.weights.shape != self.geometry.dims:
            raise InputError("residual field does not match geometry")
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise InputError("weights must lie in [0, 1]")
        if not np.all(np.isfinite(self.residuals[:, self.weights > 0])):
            raise InputError("residuals must be finite in the mask")

    @property
    def n_channels(self) -> int:
        return self.residuals.shape[0]


def _positive_log(values: np.ndarray, what: str) -> np.ndarray:
    if np.any(values <= 0):
        raise InputError(
            f"non-positive {what}; shift intensities to be positive (e.g. subtract min and add 1) first"
        )
    return np.log(values)


def compute_residuals(mv: MultichannelVolume, model: MixtureModel, resp: ResponsibilityStack) -> ResidualField:
    """Log residual between observed intensities and the posterior-weighted class mean."""
    if model.n_channels != mv.n_channels or resp.n_classes != model.n_components:
        raise InputError("model, responsibilities and volume disagree")
    feats = mv.features()
    gamma = resp.masked()
    recon = np.einsum("kn,kc->nc", gamma, model.means)
    e = _positive_log(feats, "intensity") - _positive_log(recon, "reconstructed mean")
    residuals = mv.scatter(e.T)
    weights = mv.mask_array.astype(np.float64)
    return ResidualField(mv.geometry, residuals, weights)


def _normal_equations(bases, w):
    ax, ay, az = bases
    px = np.einsum("xa,xb->xab", ax, ax)
    py = np.einsum("ya,yb->yab", ay, ay)
    pz = np.einsum("za,zb->zab", az, az)
    t = np.einsum("xab,xyz->abyz", px, w)
    t = np.einsum("ycd,abyz->abcdz", py, t)
    g = np.einsum("zef,abcdz->acebdf", pz, t)
    m = ax.shape[1] * ay.shape[1] * az.shape[1]
    # row index (a, c, e) flattened with a fastest to match x-fastest coefficients
    g = g.transpose(2, 1, 0, 5, 4, 3).reshape(m, m)
    return g


def _project(bases, r):
    ax, ay, az = bases
    t = np.einsum("xa,xyz->ayz", ax, r)
    t = np.einsum("yb,ayz->abz", ay, t)
    return np.einsum("zc,abz->abc", az, t)


def _synthesize(bases, coef):
    ax, ay, az = bases
    f = np.einsum("xa,abc->xbc", ax, coef)
    f = np.einsum("yb,xbc->xyc", ay, f)
    return np.einsum("zc,xyc->xyz", az, f)


def fit_bspline(
    res: ResidualField,
    control_spacing=DEFAULT_CONTROL_SPACING,
    order: int = 3,
    damping: float = DEFAULT_DAMPING,
) -> BiasField:
    """Weighted least-squares B-spline fit of each residual channel.

    Coefficients whose support holds no weight are fixed at zero. The rest
    solve the Jacobi-scaled normal equations ``D^-1/2 G D^-1/2`` (``G = B^T W B``,
    ``D = diag G``), with a ``damping`` ridge relative to that unit diagonal
    as a guard against exact singularity. Iterative refinement forms its
    residual voxel-wise (``e - B c``) rather than from the normal equations,
    which would lose about ``cond(G) * eps`` to cancellation.
    """
    geom = res.geometry
    spacing = np.broadcast_to(np.asarray(control_spacing, float), (3,))
    if order not in (2, 3):
        raise InputError("spline order must be 2 or 3")
    for n, vs, cs in zip(geom.dims, geom.spacing, spacing):
        if n > 1 and cs <= vs:
            raise InputError("control spacing must exceed the voxel spacing")
    empty = BiasField.zeros(geom, res.n_channels, spacing, order)
    bases = empty.bases(geom)
    w = res.weights
    if not np.any(w > 0):
        raise NumericalError("singular bias system: no voxels with positive weight")
    g = _normal_equations(bases, w)
    diag = np.diag(g)
    active = diag > SUPPORT_FLOOR * diag.max()
    scale = 1.0 / np.sqrt(diag[active])
    gs = g[np.ix_(active, active)] * scale[:, None] * scale[None, :]
    try:
        factor = linalg.cho_factor(gs + damping * np.eye(gs.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("singular bias system") from exc

    def solve(rhs):
        return scale * linalg.cho_solve(factor, scale * rhs[active])

    coefs = []
    inside = w > 0
    for c in range(res.n_channels):
        target = np.where(inside, res.residuals[c], 0.0)
        sol = np.zeros(g.shape[0])
        sol[active] = solve(flatten(_project(bases, w * target)))
        for _ in range(REFINEMENT_STEPS):
            fitted = _synthesize(bases, sol.reshape(empty.lattice, order="F"))
            step = solve(flatten(_project(bases, w * np.where(inside, target - fitted, 0.0))))
            sol[active] += step
            if np.abs(step).max() <= 1e-13 * max(1.0, np.abs(sol).max()):
                break
        coefs.append(sol.reshape(empty.lattice, order="F"))
    return BiasField(empty.lattice, empty.control_spacing, geom.origin, tuple(coefs), order)


def evaluate_bias(
    bf: BiasField, geometry: GridGeometry, multiplicative: bool = False, mask: Optional[np.ndarray] = None
) -> list[ScalarVolume]:
    """Dense per-channel field: log-bias by default, ``exp`` of it on request.

    With ``mask`` the field is kept only inside it and set to 0 elsewhere.
    A fit on a masked region is unconstrained outside that region, so the
    extrapolated log-field there can be large enough to overflow ``exp``.
    """
    bases = bf.bases(geometry)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != geometry.dims:
            raise InputError("mask shape differs from the geometry")
    out = []
    for c in bf.coefficients:
        f = _synthesize(bases, c)
        if mask is not None:
            f = np.where(mask, f, 0.0)
        if multiplicative:
            f = np.exp(f)
            if mask is not None:
                f[~mask] = 0.0
        out.append(ScalarVolume(geometry, f))
    return out


def correct_channels(mv: MultichannelVolume, bf: BiasField, log_fields: Optional[list] = None) -> MultichannelVolume:
    """Divide out the bias: ``y <- exp(log y - log b)`` inside the mask."""
    if bf.n_channels != mv.n_channels:
        raise InputError("bias field channel count differs from the volume")
    if log_fields is None:
        log_fields = evaluate_bias(bf, mv.geometry)
    feats = mv.features()
    logy = _positive_log(feats, "intensity")
    for c, lf in enumerate(log_fields):
        logy[:, c] -= lf.flat[mv.mask_index]
    return mv.with_features(np.exp(logy))
