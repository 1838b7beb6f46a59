"""Synthetic multichannel phantoms with known labels, mixtures, bias and noise."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bias import BiasField
from .errors import InputError
from .mixture import ResponsibilityStack
from .volume import GridGeometry, LabelMap, MultichannelVolume, ScalarVolume

__all__ = [
    "TissueSpec",
    "PhantomSpec",
    "Phantom",
    "generate",
    "direct_bias",
    "random_bias",
    "contrast_noise",
    "write_phantom",
    "LAYOUTS",
]

LAYOUTS = ("nested-ellipsoids", "stripes", "checkerboard")


@dataclass(frozen=True)
class TissueSpec:
    mean: tuple
    covariance: Optional[tuple] = None  # None means zero covariance
    pv_width: float = 0.0

    def mean_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.mean, dtype=np.float64))

    def cov_array(self) -> np.ndarray:
        c = self.mean_array().size
        if self.covariance is None:
            return np.zeros((c, c))
        return np.atleast_2d(np.asarray(self.covariance, dtype=np.float64)).reshape(c, c)


@dataclass(frozen=True)
class PhantomSpec:
    geometry: GridGeometry
    tissues: tuple
    layout: str = "nested-ellipsoids"
    noise_sigma: tuple = (0.0,)
    bias: Optional[BiasField] = None
    rng_seed: int = 0
    stripe_width: int = 8
    block: int = 8
    radii: Optional[tuple] = None  # ellipsoid shell boundaries as fractions of the outer radius

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise InputError(f"unknown layout {self.layout!r}")
        if len(self.tissues) < 1:
            raise InputError("at least one tissue is required")
        means = [t.mean_array() for t in self.tissues]
        c = means[0].size
        if any(m.size != c for m in means):
            raise InputError("tissue means disagree on the channel count")
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                if np.array_equal(means[i], means[j]):
                    raise InputError("tissue means must be pairwise distinct")
        sigma = np.broadcast_to(np.asarray(self.noise_sigma, dtype=np.float64), (c,))
        if np.any(sigma < 0):
            raise InputError("noise sigma must be non-negative")
        object.__setattr__(self, "noise_sigma", tuple(float(s) for s in sigma))
        if self.bias is not None and self.bias.n_channels != c:
            raise InputError("bias field channel count differs from the tissues")

    @property
    def n_channels(self) -> int:
        return self.tissues[0].mean_array().size


@dataclass
class Phantom:
    volume: MultichannelVolume
    labels: LabelMap
    truth: ResponsibilityStack
    bias: Optional[BiasField]
    log_bias: Optional[np.ndarray]
    sidecar: dict = field(default_factory=dict)


def contrast_noise(means: Sequence, fraction: float = 0.05) -> tuple:
    """Per-channel noise sigma as ``fraction`` of the range of tissue means."""
    m = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if m.shape[0] == 1:
        m = m.T
    return tuple(float(fraction * (col.max() - col.min())) for col in m.T)


def _soft_interval(s: np.ndarray, lo: float, hi: float, w_lo: float, w_hi: float) -> np.ndarray:
    """Membership of coordinate ``s`` in ``[lo, hi)`` with linear ramps of the given widths."""

    def ramp(edge, width):
        if width <= 0:
            return (s >= edge).astype(np.float64)
        return np.clip((s - edge) / width + 0.5, 0.0, 1.0)

    left = ramp(lo, w_lo) if np.isfinite(lo) else np.ones_like(s)
    right = ramp(hi, w_hi) if np.isfinite(hi) else np.zeros_like(s)
    return left - right


def _fractions(spec: PhantomSpec):
    """Tissue fractions ``(K, X, Y, Z)`` and the foreground mask."""
    geom = spec.geometry
    k = len(spec.tissues)
    widths = [t.pv_width for t in spec.tissues]
    x, y, z = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in geom.dims], indexing="ij")
    if spec.layout == "checkerboard":
        if any(w > 0 for w in widths):
            raise InputError("PV bands are not supported for the checkerboard layout")
        b = spec.block
        lab = ((x // b + y // b + z // b) % k).astype(int)
        frac = np.stack([(lab == j).astype(np.float64) for j in range(k)])
        return frac, np.ones(geom.dims, bool)
    if spec.layout == "stripes":
        w = spec.stripe_width
        n_stripes = int(np.ceil(geom.dims[0] / w))
        frac = np.zeros((k,) + geom.dims)
        for m in range(n_stripes):
            j = m % k
            lo = -np.inf if m == 0 else m * w - 0.5
            hi = np.inf if m == n_stripes - 1 else (m + 1) * w - 0.5
            w_lo = max(widths[j], widths[(m - 1) % k])
            w_hi = max(widths[j], widths[(m + 1) % k])
            frac[j] += _soft_interval(x, lo, hi, w_lo, w_hi)
        return frac, np.ones(geom.dims, bool)
    # nested ellipsoids: tissue 1 innermost
    centre = [(n - 1) / 2.0 for n in geom.dims]
    semi = [max(0.45 * n * sp, sp) for n, sp in zip(geom.dims, geom.spacing)]
    rho = np.sqrt(sum(((g - c) * sp / a) ** 2 for g, c, sp, a in zip((x, y, z), centre, geom.spacing, semi)))
    mask = rho < 1.0
    radii = spec.radii or tuple((j + 1) / k for j in range(k - 1))
    if len(radii) != k - 1:
        raise InputError("radii must give K-1 shell boundaries")
    # distance proxy in voxels along the mean semi-axis
    scale = float(np.mean([a / sp for a, sp in zip(semi, geom.spacing)]))
    s = rho * scale
    edges = [-np.inf] + [r * scale for r in radii] + [np.inf]
    frac = np.zeros((k,) + geom.dims)
    for j in range(k):
        w_lo = max(widths[j], widths[j - 1]) if j > 0 else 0.0
        w_hi = max(widths[j], widths[j + 1]) if j < k - 1 else 0.0
        frac[j] = _soft_interval(s, edges[j], edges[j + 1], w_lo, w_hi)
    frac[:, ~mask] = 0.0
    return frac, mask


def _cox_de_boor(u: np.ndarray, knots: np.ndarray, i: int, p: int) -> np.ndarray:
    if p == 0:
        return ((u >= knots[i]) & (u < knots[i + 1])).astype(np.float64)
    left = (u - knots[i]) / (knots[i + p] - knots[i]) * _cox_de_boor(u, knots, i, p - 1)
    right = (knots[i + p + 1] - u) / (knots[i + p + 1] - knots[i + 1]) * _cox_de_boor(u, knots, i + 1, p - 1)
    return left + right


def direct_bias(bf: BiasField, geometry: GridGeometry) -> np.ndarray:
    """Log-bias ``(C, X, Y, Z)`` by direct summation over every control point.

    Basis values come from the Cox-de Boor recursion on the uniform knot
    vector, independently of :mod:`mvseg.bias`.
    """
    p = bf.order
    axes = []
    for n, vs, cs, L in zip(geometry.dims, geometry.spacing, bf.control_spacing, bf.lattice):
        u = np.arange(n) * vs / cs
        # control l is centered at l - 1; its knots span l - 1 - (p+1)/2 .. l - 1 + (p+1)/2
        vals = []
        for l in range(L):
            knots = (l - 1) - (p + 1) / 2.0 + np.arange(p + 2, dtype=np.float64)
            vals.append(_cox_de_boor(u, knots, 0, p))
        axes.append(np.stack(vals, axis=1))
    ax, ay, az = axes
    out = np.zeros((bf.n_channels,) + geometry.dims)
    for c, coef in enumerate(bf.coefficients):
        for a in range(bf.lattice[0]):
            for b in range(bf.lattice[1]):
                for d in range(bf.lattice[2]):
                    w = coef[a, b, d]
                    if w != 0.0:
                        out[c] += w * ax[:, a, None, None] * ay[None, :, b, None] * az[None, None, :, d]
    return out


def random_bias(
    geometry: GridGeometry,
    n_channels: int,
    log_range: float = 0.2,
    control_spacing: float = 50.0,
    order: int = 3,
    seed: int = 0,
    mask: Optional[np.ndarray] = None,
) -> BiasField:
    """Smooth random log-bias, zero mean over ``mask`` and max magnitude ``log_range``."""
    empty = BiasField.zeros(geometry, n_channels, control_spacing, order)
    rng = np.random.Generator(np.random.Philox(seed))
    mask = np.ones(geometry.dims, bool) if mask is None else mask
    coefs = []
    for _ in range(n_channels):
        c = rng.standard_normal(empty.lattice)
        one = BiasField(empty.lattice, empty.control_spacing, empty.origin, (c,), order)
        f = direct_bias(one, geometry)[0]
        c = c - f[mask].mean()
        f = f - f[mask].mean()
        peak = np.abs(f[mask]).max()
        coefs.append(c * (log_range / peak) if peak > 0 else c)
    return BiasField(empty.lattice, empty.control_spacing, empty.origin, tuple(coefs), order)


def _sqrt_cov(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def generate(spec: PhantomSpec) -> Phantom:
    """Sample a phantom: labels from the layout, class samples mixed by PV fractions,
    multiplicative bias, then additive Gaussian noise."""
    geom = spec.geometry
    k = len(spec.tissues)
    c = spec.n_channels
    frac, mask = _fractions(spec)
    labels = np.argmax(frac, axis=0).astype(np.int32) + 1
    labels[~mask] = 0
    for j in range(k):
        if not np.any(labels == j + 1):
            raise InputError(f"degenerate layout: tissue {j + 1} has no voxels")
    rng = np.random.Generator(np.random.Philox(spec.rng_seed))
    data = np.zeros((c,) + geom.dims)
    for j, t in enumerate(spec.tissues):
        z = rng.standard_normal((c,) + geom.dims)
        sample = t.mean_array()[:, None, None, None] + np.einsum("cd,dxyz->cxyz", _sqrt_cov(t.cov_array()), z)
        data += frac[j][None] * sample
    log_bias = None
    if spec.bias is not None:
        log_bias = direct_bias(spec.bias, geom)
        data *= np.exp(log_bias)
    noise = rng.standard_normal((c,) + geom.dims)
    data += np.asarray(spec.noise_sigma)[:, None, None, None] * noise
    data[:, ~mask] = 0.0
    truth_maps = frac / np.where(mask, frac.sum(axis=0), 1.0)
    truth_maps[:, ~mask] = 0.0
    volume = MultichannelVolume(geom, tuple(ScalarVolume(geom, d) for d in data), mask)
    sidecar = {
        "geometry": {"dims": list(geom.dims), "spacing": list(geom.spacing), "origin": list(geom.origin)},
        "layout": spec.layout,
        "rng_seed": spec.rng_seed,
        "noise_sigma": list(spec.noise_sigma),
        "tissues": [
            {
                "label": j + 1,
                "mean": t.mean_array().tolist(),
                "covariance": t.cov_array().tolist(),
                "pv_width": t.pv_width,
            }
            for j, t in enumerate(spec.tissues)
        ],
        "label_semantics": {"0": "background", **{str(j + 1): f"tissue_{j + 1}" for j in range(k)}},
        "bias": spec.bias.to_dict() if spec.bias is not None else None,
    }
    return Phantom(
        volume,
        LabelMap(geom, labels, k),
        ResponsibilityStack(geom, truth_maps, mask),
        spec.bias,
        log_bias,
        sidecar,
    )


def write_phantom(ph: Phantom, out_dir) -> dict:
    """Write channels, truth labels/TPMs, multiplicative bias and ``phantom.json``."""
    from .nifti import save_labels, save_volume

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    geom = ph.volume.geometry
    files = {"channels": [], "truth_tpms": [], "bias": [], "mask": "mask.nii", "labels": "truth_labels.nii"}
    for c, ch in enumerate(ph.volume.channels):
        name = f"channel_{c + 1}.nii"
        save_volume(ch, os.path.join(out_dir, name))
        files["channels"].append(name)
    for k in range(ph.truth.n_classes):
        name = f"truth_tpm_{k + 1}.nii"
        save_volume(ph.truth.volume(k), os.path.join(out_dir, name))
        files["truth_tpms"].append(name)
    save_labels(ph.labels, os.path.join(out_dir, files["labels"]))
    save_volume(ScalarVolume(geom, ph.volume.mask_array.astype(float)), os.path.join(out_dir, "mask.nii"), "uint8")
    if ph.log_bias is not None:
        for c, lb in enumerate(ph.log_bias):
            name = f"truth_bias_{c + 1}.nii"
            save_volume(ScalarVolume(geom, np.exp(lb)), os.path.join(out_dir, name))
            files["bias"].append(name)
    sidecar = dict(ph.sidecar, files=files)
    with open(os.path.join(out_dir, "phantom.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return sidecar
