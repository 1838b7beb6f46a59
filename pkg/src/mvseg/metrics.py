"""Overlap indices and volume agreement between segmentations.

TPF, EF and OC are directional (prediction vs truth); JI and SI are symmetric.
Undefined values (division by zero) are reported as ``None``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError
from .volume import GridGeometry, LabelMap

__all__ = [
    "fuzzy_jaccard",
    "similarity_index",
    "confusion_counts",
    "hard_indices",
    "volume_corrected_average",
    "icv_fractions",
    "OverlapReport",
    "VolumeReport",
    "overlap_report",
    "delta_icv",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("class", "fSI", "SI", "TPF", "EF", "OC", "volume_voxels", "volume_mm3")


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64)


def fuzzy_jaccard(a, b, mask: Optional[np.ndarray] = None) -> float:
    """``sum min(a, b) / sum max(a, b)``; two empty maps agree perfectly (1.0)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InputError("geometry mismatch")
    if mask is not None:
        a, b = a[mask], b[mask]
    num = float(np.minimum(a, b).sum())
    den = float(np.maximum(a, b).sum())
    return 1.0 if den == 0 else num / den


def similarity_index(ji: float) -> float:
    return 2.0 * ji / (1.0 + ji)


def confusion_counts(pred: LabelMap, truth: LabelMap, label: int, mask: Optional[np.ndarray] = None):
    """One-vs-rest ``(TP, FP, FN)`` for ``label`` inside ``mask``.

    The mask defaults to the union of both label maps' foregrounds.
    """
    if pred.geometry.dims != truth.geometry.dims:
        raise InputError("geometry mismatch")
    if mask is None:
        mask = pred.mask | truth.mask
    p = pred.labels[mask] == label
    t = truth.labels[mask] == label
    return int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))


def hard_indices(tp: int, fp: int, fn: int) -> dict:
    """Binary JI and SI, true-positive fraction, extra fraction and overlap conformity."""
    union = tp + fp + fn
    ji = 1.0 if union == 0 else tp / union
    ref = tp + fn
    return {
        "JI": ji,
        "SI": similarity_index(ji),
        "TPF": tp / ref if ref > 0 else None,
        "EF": fp / ref if ref > 0 else None,
        "OC": 1.0 - (fp + fn) / tp if tp > 0 else None,
    }


def volume_corrected_average(values: Sequence[float], volumes: Sequence[float], mode: str = "inverse") -> float:
    """Average of per-class values.

    ``mode="inverse"`` weights each class by the inverse of its volume, so
    small classes count as much as large ones; ``mode="mean"`` is the plain mean.
    """
    vals = np.asarray(values, dtype=np.float64)
    vols = np.asarray(volumes, dtype=np.float64)
    if vals.shape != vols.shape or vals.size == 0:
        raise InputError("values and volumes must be non-empty and aligned")
    if mode == "mean":
        return float(vals.mean())
    if mode != "inverse":
        raise InputError(f"unknown averaging mode {mode!r}")
    if np.any(vols <= 0):
        raise InputError("zero volume")
    w = 1.0 / vols
    return float(np.sum(w * vals) / np.sum(w))


@dataclass
class VolumeReport:
    names: list
    volume_mm3: list
    fraction: list
    icv_mm3: float

    def as_dict(self) -> dict:
        return {
            "icv_mm3": self.icv_mm3,
            "classes": [
                {"class": n, "volume_mm3": v, "icv_fraction": f}
                for n, v, f in zip(self.names, self.volume_mm3, self.fraction)
            ],
        }


def icv_fractions(
    source,
    geometry: GridGeometry,
    mask: Optional[np.ndarray] = None,
    names: Optional[Sequence[str]] = None,
) -> VolumeReport:
    """Class volumes and their fraction of the mask (intracranial) volume.

    ``source`` is a :class:`LabelMap` (voxel counts) or a ``(K, X, Y, Z)``
    stack / ResponsibilityStack of probability maps (summed memberships).
    """
    if isinstance(source, LabelMap):
        k = source.n_classes
        mask = source.mask if mask is None else np.asarray(mask, bool)
        counts = np.array([np.sum(source.labels[mask] == j) for j in range(1, k + 1)], dtype=np.float64)
    else:
        maps = np.asarray(getattr(source, "maps", source), dtype=np.float64)
        if mask is None:
            mask = getattr(source, "mask", None)
        mask = np.ones(geometry.dims, bool) if mask is None else np.asarray(mask, bool)
        k = maps.shape[0]
        counts = maps[:, mask].sum(axis=1)
    n_mask = int(np.sum(mask))
    if n_mask == 0:
        raise InputError("empty mask")
    vox = geometry.voxel_volume
    icv = n_mask * vox
    names = list(names) if names is not None else [f"class_{j}" for j in range(1, k + 1)]
    return VolumeReport(names, (counts * vox).tolist(), (counts / n_mask).tolist(), icv)


def delta_icv(a: VolumeReport, b: VolumeReport) -> list[float]:
    """Per-class ICV-fraction difference ``b - a`` (e.g. rescan minus scan)."""
    if len(a.fraction) != len(b.fraction):
        raise InputError("reports have different class counts")
    return [fb - fa for fa, fb in zip(a.fraction, b.fraction)]


@dataclass
class OverlapReport:
    rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    mode: str = "inverse"

    def table(self) -> list[dict]:
        return self.rows + ([self.aggregate] if self.aggregate else [])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.table():
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "columns": list(REPORT_COLUMNS),
            "directional": ["TPF", "EF", "OC"],
            "aggregate_mode": self.mode,
            "classes": self.rows,
            "aggregate": self.aggregate,
        }
        return json.dumps(doc, indent=2)


def overlap_report(
    pred: Optional[LabelMap] = None,
    truth: Optional[LabelMap] = None,
    pred_maps=None,
    truth_maps=None,
    names: Optional[Sequence[str]] = None,
    geometry: Optional[GridGeometry] = None,
    mask: Optional[np.ndarray] = None,
    mode: str = "inverse",
) -> OverlapReport:
    """Per-class fSI (from probability maps) and SI/TPF/EF/OC (from labels), plus a Brain row."""
    if pred is None and pred_maps is None:
        raise InputError("nothing to evaluate")
    if pred is not None and truth is None or pred_maps is not None and truth_maps is None:
        raise InputError("a prediction needs a matching truth")
    if pred_maps is not None:
        pm = np.asarray(getattr(pred_maps, "maps", pred_maps), dtype=np.float64)
        tm = np.asarray(getattr(truth_maps, "maps", truth_maps), dtype=np.float64)
        if pm.shape != tm.shape:
            raise InputError("geometry mismatch")
        k = pm.shape[0]
    else:
        k = max(pred.n_classes, truth.n_classes)
    if geometry is None:
        geometry = (pred or truth).geometry if pred is not None else getattr(pred_maps, "geometry", None)
    vox = geometry.voxel_volume if geometry is not None else 1.0
    if mask is None:
        if truth is not None:
            mask = truth.mask | pred.mask
        elif hasattr(truth_maps, "mask"):
            mask = truth_maps.mask
        else:
            mask = tm.sum(axis=0) > 0
    names = list(names) if names is not None else [f"class_{j}" for j in range(1, k + 1)]
    rows = []
    for j in range(k):
        row = {"class": names[j]}
        if pred_maps is not None:
            row["fSI"] = similarity_index(fuzzy_jaccard(pm[j], tm[j], mask))
            vol = float(tm[j][mask].sum())
        if pred is not None:
            counts = confusion_counts(pred, truth, j + 1, mask)
            row.update({key: val for key, val in hard_indices(*counts).items()})
            row["TP"], row["FP"], row["FN"] = counts
            vol = float(counts[0] + counts[2])
        row["volume_voxels"] = vol
        row["volume_mm3"] = vol * vox
        rows.append(row)
    agg = {"class": "Brain"}
    vols = [r["volume_voxels"] for r in rows]
    for key in ("fSI", "SI", "TPF", "EF", "OC"):
        vals = [r.get(key) for r in rows]
        if all(v is not None for v in vals) and all(v > 0 for v in vols):
            agg[key] = volume_corrected_average(vals, vols, mode)
        else:
            agg[key] = None
    agg["volume_voxels"] = float(sum(vols))
    agg["volume_mm3"] = float(sum(vols)) * vox
    return OverlapReport(rows, agg, mode)
