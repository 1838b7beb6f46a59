"""Minimal NIfTI-1 single-file (.nii) reader and writer.

Only the subset the package needs is supported: uncompressed little-endian
files, 3-D data, datatypes uint8 / int16 / float32, ``vox_offset`` 352 and no
intensity scaling. Orientation beyond voxel spacing and origin is ignored.
Anything else is rejected with an :class:`InputError`.
"""
from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .errors import InputError
from .volume import GridGeometry, LabelMap, ScalarVolume, flatten, unflatten

__all__ = ["HEADER_DTYPE", "load_volume", "load_labels", "save_volume", "save_labels", "read_nifti"]

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> numpy dtype
_CODES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_DTYPES = {v: k for k, v in _CODES.items()}
VOX_OFFSET = 352


def read_nifti(path, expected: Optional[GridGeometry] = None) -> tuple[GridGeometry, np.ndarray]:
    """Return geometry and the raw data array (file dtype, indexed [x, y, z])."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}", path=path) from exc
    if len(raw) < VOX_OFFSET:
        raise InputError(f"{path}: file too short for a NIfTI-1 header")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if hdr["sizeof_hdr"] != 348:
        if int(np.frombuffer(raw[:4], ">i4")[0]) == 348:
            raise InputError(f"{path}: big-endian NIfTI is not supported")
        raise InputError(f"{path}: not a NIfTI-1 file")
    if hdr["magic"] != b"n+1":
        raise InputError(f"{path}: only single-file NIfTI-1 (magic 'n+1') is supported")
    if int(hdr["vox_offset"]) != VOX_OFFSET:
        raise InputError(f"{path}: vox_offset {hdr['vox_offset']} unsupported (expected 352)")
    code = int(hdr["datatype"])
    if code not in _CODES:
        raise InputError(f"{path}: unsupported datatype code {code}")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise InputError(f"{path}: intensity scaling (scl_slope/scl_inter) is not supported")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise InputError(f"{path}: invalid dim[0]={ndim}")
    dims = [int(d) for d in hdr["dim"][1 : ndim + 1]] + [1] * (7 - ndim)
    if any(d < 1 for d in dims):
        raise InputError(f"{path}: invalid dimensions {dims[:ndim]}")
    if any(d != 1 for d in dims[3:]):
        raise InputError(f"{path}: only 3-D volumes are supported")
    dims = tuple(dims[:3])
    pixdim = [float(p) if ndim > a and p > 0 else 1.0 for a, p in enumerate(hdr["pixdim"][1:4])]
    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    if int(hdr["qform_code"]) == 0 and int(hdr["sform_code"]) > 0:
        origin = (float(hdr["srow_x"][3]), float(hdr["srow_y"][3]), float(hdr["srow_z"][3]))
    geometry = GridGeometry(dims, tuple(pixdim), origin)
    if expected is not None and not geometry.same_grid(expected):
        raise InputError(f"{path}: dimension mismatch, {geometry.dims} vs expected {expected.dims}")
    dtype = _CODES[code]
    nbytes = geometry.n_voxels * dtype.itemsize
    if len(raw) < VOX_OFFSET + nbytes:
        raise InputError(f"{path}: truncated data block")
    flat = np.frombuffer(raw, dtype=dtype, count=geometry.n_voxels, offset=VOX_OFFSET)
    return geometry, unflatten(flat.copy(), dims)


def load_volume(path, expected: Optional[GridGeometry] = None) -> ScalarVolume:
    geometry, data = read_nifti(path, expected)
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise InputError(f"{os.fspath(path)}: non-finite data")
    return ScalarVolume(geometry, data)


def load_labels(path, n_classes: Optional[int] = None, expected=None) -> LabelMap:
    geometry, data = read_nifti(path, expected)
    if data.dtype.kind == "f" and not np.all(data == np.round(data)):
        raise InputError(f"{os.fspath(path)}: label volume contains non-integer values")
    labels = data.astype(np.int32)
    k = int(labels.max(initial=0)) if n_classes is None else n_classes
    return LabelMap(geometry, labels, k)


def _header(geometry: GridGeometry, dtype: np.dtype, descrip: str) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *geometry.dims, 1, 1, 1, 1]
    hdr["datatype"] = _DTYPES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *geometry.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip.encode("ascii", "replace")[:79]
    hdr["qform_code"] = 1
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = geometry.origin
    hdr["magic"] = b"n+1"
    return hdr


def _write(path, geometry: GridGeometry, data: np.ndarray, descrip: str = "mvseg") -> None:
    hdr = _header(geometry, data.dtype, descrip)
    payload = hdr.tobytes() + b"\x00" * 4 + flatten(data).tobytes()
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise InputError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def save_volume(v: ScalarVolume, path, dtype="float32") -> None:
    """Write a scalar volume; values are cast to ``dtype`` (uint8, int16 or float32)."""
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in _DTYPES:
        raise InputError(f"unsupported storage dtype {dtype}")
    data = v.values
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if data.min() < info.min or data.max() > info.max or not np.all(data == np.round(data)):
            raise InputError(f"values not representable as {dtype}")
    _write(path, v.geometry, data.astype(dtype))


def save_labels(lm: LabelMap, path) -> None:
    dtype = np.dtype("u1") if lm.n_classes < 256 else np.dtype("<i2")
    _write(path, lm.geometry, lm.labels.astype(dtype), "labels")
