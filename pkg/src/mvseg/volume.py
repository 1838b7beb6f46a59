"""Grid-aware volume types and the two preprocessing filters.

Arrays are indexed ``[x, y, z]``. The linear voxel index used across the
package is the Fortran-order flattening (x fastest), which is also the on-disk
NIfTI order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import InputError

__all__ = [
    "GridGeometry",
    "ScalarVolume",
    "MultichannelVolume",
    "LabelMap",
    "flatten",
    "unflatten",
    "nearest_rank_percentile",
    "enhance_tail",
    "translate_channel",
]


def flatten(arr: np.ndarray) -> np.ndarray:
    """Return the x-fastest linear view of a 3-D (or stacked 4-D) array."""
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1, order="F")
    return arr.ravel(order="F")


def unflatten(flat: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    if flat.ndim == 2:
        return flat.reshape((flat.shape[0],) + tuple(dims), order="F")
    return flat.reshape(tuple(dims), order="F")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InputError("geometry needs three dims, spacings and origin coordinates")
        if any(d < 1 for d in dims):
            raise InputError(f"dims must be >= 1, got {dims}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise InputError(f"spacing must be positive, got {spacing}")
        if dims[0] * dims[1] * dims[2] > np.iinfo(np.intp).max:
            raise InputError("voxel count exceeds addressable range")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def same_grid(self, other: "GridGeometry") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=1e-6, atol=0)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-4)
        )


@dataclass(frozen=True)
class ScalarVolume:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim == 1 and values.size == self.geometry.n_voxels:
            values = unflatten(values, self.geometry.dims)
        if values.shape != self.geometry.dims:
            raise InputError(
                f"values shape {values.shape} does not match geometry {self.geometry.dims}"
            )
        if not np.all(np.isfinite(values)):
            raise InputError("non-finite data")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def flat(self) -> np.ndarray:
        return flatten(self.values)


@dataclass(frozen=True)
class MultichannelVolume:
    """C co-registered channels on one grid, with an optional Boolean mask."""

    geometry: GridGeometry
    channels: tuple[ScalarVolume, ...]
    mask: Optional[np.ndarray] = None
    _index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        channels = tuple(self.channels)
        if not channels:
            raise InputError("at least one channel is required")
        for c, ch in enumerate(channels):
            if not ch.geometry.same_grid(self.geometry):
                raise InputError(f"channel {c} geometry differs from the volume geometry")
        object.__setattr__(self, "channels", channels)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool).copy()
            if mask.shape != self.geometry.dims:
                raise InputError("mask shape does not match geometry")
            object.__setattr__(self, "mask", _frozen(mask))
        index = np.flatnonzero(flatten(self.mask_array))
        object.__setattr__(self, "_index", _frozen(index))

    @classmethod
    def from_arrays(cls, arrays, geometry: Optional[GridGeometry] = None, mask=None):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        if geometry is None:
            geometry = GridGeometry(arrays[0].shape)
        return cls(geometry, tuple(ScalarVolume(geometry, a) for a in arrays), mask)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def mask_array(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.geometry.dims, dtype=bool)
        return self.mask

    @property
    def mask_index(self) -> np.ndarray:
        """Linear (x-fastest) indices of in-mask voxels, ascending."""
        return self._index

    @property
    def n_masked(self) -> int:
        return int(self._index.size)

    def stack(self) -> np.ndarray:
        return np.stack([ch.values for ch in self.channels])

    def features(self) -> np.ndarray:
        """In-mask feature vectors, shape ``(n_masked, C)``."""
        return np.stack([ch.flat[self._index] for ch in self.channels], axis=1)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Place per-masked-voxel values (trailing axis) into full grids, 0 outside."""
        values = np.asarray(values)
        lead = values.shape[:-1]
        out = np.zeros(lead + (self.geometry.n_voxels,), dtype=values.dtype)
        out[..., self._index] = values
        return out.reshape(lead + self.geometry.dims, order="F")

    def with_features(self, feats: np.ndarray) -> "MultichannelVolume":
        """Copy with in-mask values replaced; out-of-mask voxels untouched."""
        chans = []
        for c, ch in enumerate(self.channels):
            flat = ch.flat.copy()
            flat[self._index] = feats[:, c]
            chans.append(ScalarVolume(self.geometry, unflatten(flat, self.geometry.dims)))
        return MultichannelVolume(self.geometry, tuple(chans), self.mask)


@dataclass(frozen=True)
class LabelMap:
    geometry: GridGeometry
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.array(self.labels, copy=True)
        if labels.ndim == 1 and labels.size == self.geometry.n_voxels:
            labels = unflatten(labels, self.geometry.dims)
        if labels.shape != self.geometry.dims:
            raise InputError("label array shape does not match geometry")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise InputError("labels must be integers")
        labels = labels.astype(np.int32)
        if labels.min(initial=0) < 0 or labels.max(initial=0) > self.n_classes:
            raise InputError(f"labels must lie in [0..{self.n_classes}]")
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0

    @property
    def flat(self) -> np.ndarray:
        return flatten(self.labels)


def nearest_rank_percentile(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(P/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise InputError("empty mask")
    rank = max(1, int(math.ceil(percentile / 100.0 * v.size)))
    return float(v[min(rank, v.size) - 1])


def enhance_tail(
    v: ScalarVolume, percentile: float = 85.0, radius: int = 1, mask: Optional[np.ndarray] = None
) -> ScalarVolume:
    """Replace in-mask voxels above a percentile with their local median.

    The median is taken over the in-mask voxels of the ``(2*radius+1)**3``
    window clipped at the volume bounds, using the input values throughout.
    """
    if not 0 < percentile <= 100:
        raise InputError("percentile must be in (0, 100]")
    if radius < 1:
        raise InputError("radius must be a positive integer")
    mask = np.ones(v.geometry.dims, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise InputError("empty mask")
    data = v.values
    threshold = nearest_rank_percentile(data[mask], percentile)
    hot = mask & (data > threshold)
    if not hot.any():
        return v
    padded = np.pad(np.where(mask, data, np.nan), radius, constant_values=np.nan)
    windows = sliding_window_view(padded, (2 * radius + 1,) * 3)
    xs, ys, zs = np.nonzero(hot)
    local = windows[xs, ys, zs].reshape(xs.size, -1)
    out = data.copy()
    out[xs, ys, zs] = np.nanmedian(local, axis=1)
    return ScalarVolume(v.geometry, out)


def translate_channel(
    mv: MultichannelVolume, channel: int, offset: Sequence[float]
) -> MultichannelVolume:
    """Resample one channel at positions shifted by ``offset`` (mm).

    Output voxel ``p`` takes the trilinear value of the input at ``p + offset``.
    Samples falling outside the grid become 0 and leave the mask.
    """
    if not 0 <= channel < mv.n_channels:
        raise InputError(f"invalid channel index {channel}")
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (3,):
        raise InputError("offset must have three components")
    if not offset.any():
        return mv
    geom = mv.geometry
    shift = offset / np.asarray(geom.spacing)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in geom.dims], indexing="ij")
    coords = [g + s for g, s in zip(grids, shift)]
    tol = 1e-9
    inside = np.ones(geom.dims, dtype=bool)
    for c, n in zip(coords, geom.dims):
        inside &= (c >= -tol) & (c <= n - 1 + tol)
    coords = [np.clip(c, 0, n - 1) for c, n in zip(coords, geom.dims)]
    moved = ndimage.map_coordinates(mv.channels[channel].values, coords, order=1, mode="nearest")
    moved = np.where(inside, moved, 0.0)
    chans = list(mv.channels)
    chans[channel] = ScalarVolume(geom, moved)
    return MultichannelVolume(geom, tuple(chans), mv.mask_array & inside)
