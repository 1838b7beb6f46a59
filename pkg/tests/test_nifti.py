import struct

import numpy as np
import pytest

from mvseg.errors import InputError
from mvseg.nifti import HEADER_DTYPE, load_labels, load_volume, read_nifti, save_labels, save_volume
from mvseg.volume import GridGeometry, LabelMap, ScalarVolume


def test_ones_roundtrip(tmp_path):
    g = GridGeometry((2, 2, 1))
    save_volume(ScalarVolume(g, np.ones(g.dims)), tmp_path / "a.nii")
    v = load_volume(tmp_path / "a.nii")
    assert v.geometry.n_voxels == 4
    assert np.all(v.values == 1.0)


def test_geometry_and_float32_bits_roundtrip(tmp_path, small_geometry, rng):
    data = rng.random(small_geometry.dims).astype(np.float32).astype(np.float64)
    save_volume(ScalarVolume(small_geometry, data), tmp_path / "g.nii")
    v = load_volume(tmp_path / "g.nii")
    assert v.geometry.dims == small_geometry.dims
    assert v.geometry.spacing == small_geometry.spacing
    assert v.geometry.origin == small_geometry.origin
    assert np.array_equal(v.values.astype(np.float32).view(np.uint32), data.astype(np.float32).view(np.uint32))


def test_ramp_and_bytes_on_disk(tmp_path):
    g = GridGeometry((3, 3, 3))
    ramp = np.arange(27, dtype=float).reshape(g.dims, order="F")
    save_volume(ScalarVolume(g, ramp), tmp_path / "r.nii")
    raw = (tmp_path / "r.nii").read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    # x-fastest on disk
    assert np.array_equal(np.frombuffer(raw[352:], "<f4"), np.arange(27, dtype=np.float32))
    assert np.array_equal(load_volume(tmp_path / "r.nii").values, ramp)


def test_labels_uint8(tmp_path):
    g = GridGeometry((3, 2, 2))
    labels = np.array([0, 1, 2, 3] * 3).reshape(g.dims)
    save_labels(LabelMap(g, labels, 3), tmp_path / "l.nii")
    hdr = np.frombuffer((tmp_path / "l.nii").read_bytes()[:348], HEADER_DTYPE)[0]
    assert hdr["datatype"] == 2
    back = load_labels(tmp_path / "l.nii", 3)
    assert np.array_equal(back.labels, labels)


def test_int16_roundtrip(tmp_path):
    g = GridGeometry((2, 2, 2))
    vals = np.array([-300, 0, 5, 32000, 1, 2, 3, 4], float).reshape(g.dims)
    save_volume(ScalarVolume(g, vals), tmp_path / "i.nii", "int16")
    assert np.array_equal(load_volume(tmp_path / "i.nii").values, vals)


def test_nan_rejected(tmp_path):
    g = GridGeometry((2, 2, 1))
    save_volume(ScalarVolume(g, np.ones(g.dims)), tmp_path / "n.nii")
    raw = bytearray((tmp_path / "n.nii").read_bytes())
    raw[352:356] = struct.pack("<f", float("nan"))
    (tmp_path / "n.nii").write_bytes(bytes(raw))
    with pytest.raises(InputError, match="non-finite data"):
        load_volume(tmp_path / "n.nii")


def _patch(path, field, value):
    raw = bytearray(path.read_bytes())
    hdr = np.frombuffer(bytes(raw[:348]), HEADER_DTYPE)[0].copy()
    hdr[field] = value
    raw[:348] = hdr.tobytes()
    path.write_bytes(bytes(raw))


@pytest.mark.parametrize(
    "field,value,msg",
    [
        ("datatype", 64, "datatype"),
        ("vox_offset", 400.0, "vox_offset"),
        ("magic", b"ni1", "magic"),
        ("scl_slope", 2.0, "scaling"),
    ],
)
def test_unsupported_features_rejected(tmp_path, field, value, msg):
    g = GridGeometry((2, 2, 1))
    p = tmp_path / "x.nii"
    save_volume(ScalarVolume(g, np.ones(g.dims)), p)
    _patch(p, field, value)
    with pytest.raises(InputError, match=msg):
        load_volume(p)


def test_four_d_rejected(tmp_path):
    g = GridGeometry((2, 2, 1))
    p = tmp_path / "x.nii"
    save_volume(ScalarVolume(g, np.ones(g.dims)), p)
    _patch(p, "dim", [4, 2, 2, 1, 2, 1, 1, 1])
    with pytest.raises(InputError, match="3-D"):
        load_volume(p)


def test_big_endian_rejected(tmp_path):
    p = tmp_path / "be.nii"
    p.write_bytes(struct.pack(">i", 348) + b"\x00" * 400)
    with pytest.raises(InputError, match="big-endian"):
        read_nifti(p)


def test_missing_file_and_dimension_mismatch(tmp_path):
    with pytest.raises(InputError) as exc:
        load_volume(tmp_path / "missing.nii")
    assert exc.value.path.endswith("missing.nii")
    g = GridGeometry((2, 2, 1))
    save_volume(ScalarVolume(g, np.ones(g.dims)), tmp_path / "a.nii")
    with pytest.raises(InputError, match="mismatch"):
        load_volume(tmp_path / "a.nii", GridGeometry((2, 2, 2)))


def test_probability_map_exact(tmp_path, rng):
    g = GridGeometry((4, 4, 4))
    p = rng.random(g.dims).astype(np.float32).astype(float)
    save_volume(ScalarVolume(g, p), tmp_path / "p.nii")
    assert np.abs(load_volume(tmp_path / "p.nii").values - p).max() == 0.0
