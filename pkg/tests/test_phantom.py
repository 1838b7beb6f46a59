import json

import numpy as np
import pytest

from mvseg.bias import evaluate_bias
from mvseg.em import EmConfig, em_fit
from mvseg.errors import InputError
from mvseg.mixture import init_kmeans
from mvseg.phantom import PhantomSpec, TissueSpec, contrast_noise, direct_bias, generate, random_bias, write_phantom
from mvseg.volume import GridGeometry

G = GridGeometry((16, 16, 16))


def spec(**kw):
    base = dict(tissues=(TissueSpec((100.0,)), TissueSpec((200.0,)), TissueSpec((300.0,))), noise_sigma=(0.0,))
    base.update(kw)
    return PhantomSpec(kw.pop("geometry", G), **{k: v for k, v in base.items() if k != "geometry"})


@pytest.mark.parametrize("layout", ["nested-ellipsoids", "stripes", "checkerboard"])
def test_noise_free_voxels_equal_class_means(layout):
    ph = generate(spec(layout=layout, block=4, stripe_width=4))
    v = ph.volume.channels[0].values
    for k in range(1, 4):
        assert np.all(v[ph.labels.labels == k] == 100.0 * k)


def test_seed_determinism_bit_identical():
    s = spec(noise_sigma=(7.0,), bias=random_bias(G, 1, 0.2, 8.0, seed=1), rng_seed=42)
    a, b = generate(s), generate(s)
    assert np.array_equal(a.volume.stack(), b.volume.stack())
    c = generate(spec(noise_sigma=(7.0,), rng_seed=43))
    assert not np.array_equal(a.volume.stack(), c.volume.stack())


def test_sample_means_within_sampling_error():
    sigma = contrast_noise([(100.0,), (200.0,)], 0.05)[0]
    ph = generate(spec(tissues=(TissueSpec((100.0,)), TissueSpec((200.0,))), noise_sigma=(sigma,), layout="stripes", rng_seed=3))
    v = ph.volume.channels[0].values
    for k, mu in ((1, 100.0), (2, 200.0)):
        vals = v[ph.labels.labels == k]
        assert abs(vals.mean() - mu) < 3 * sigma / np.sqrt(vals.size)


def test_covariance_sampling_statistics():
    cov = np.array([[25.0, 10.0], [10.0, 16.0]])
    s = PhantomSpec(
        GridGeometry((32, 32, 16)),
        (TissueSpec((100.0, 50.0), cov.tolist()), TissueSpec((300.0, 80.0), cov.tolist())),
        layout="stripes",
        stripe_width=16,
        noise_sigma=(0.0, 0.0),
        rng_seed=9,
    )
    ph = generate(s)
    feats = ph.volume.features()[(ph.labels.labels.ravel(order="F") == 1)]
    assert np.allclose(np.cov(feats.T), cov, rtol=0.1)


def test_injected_bias_matches_evaluated_sidecar_coefficients():
    bf = random_bias(G, 1, 0.2, 8.0, seed=4)
    ph = generate(spec(bias=bf))
    again = evaluate_bias(type(bf).from_dict(ph.sidecar["bias"]), G)[0].values
    assert np.abs(ph.log_bias[0] - again).max() < 1e-9
    assert np.abs(direct_bias(bf, G)[0] - again).max() < 1e-9


def test_random_bias_properties():
    mask = np.zeros(G.dims, bool)
    mask[2:14, 2:14, 2:14] = True
    bf = random_bias(G, 2, 0.2, 8.0, seed=6, mask=mask)
    for f in direct_bias(bf, G):
        assert abs(f[mask].mean()) < 1e-12
        assert np.abs(f[mask]).max() == pytest.approx(0.2)


def test_pv_band_linear_ramp_and_normalization():
    s = spec(tissues=(TissueSpec((100.0,), pv_width=2), TissueSpec((200.0,), pv_width=2)), layout="stripes", stripe_width=8)
    ph = generate(s)
    t = ph.truth.maps
    assert np.allclose(t.sum(axis=0), 1.0)
    row = t[0, :, 0, 0]
    # stripe boundary sits between voxels 7 and 8; the ramp spans +-1 voxel
    assert row[6] == 1.0 and row[7] == pytest.approx(0.75) and row[8] == pytest.approx(0.25) and row[9] == 0.0
    v = ph.volume.channels[0].values[:, 0, 0]
    assert v[7] == pytest.approx(125.0) and v[8] == pytest.approx(175.0)


def test_errors():
    with pytest.raises(InputError):
        spec(tissues=(TissueSpec((1.0,)), TissueSpec((1.0,))))
    with pytest.raises(InputError):
        spec(noise_sigma=(-1.0,))
    with pytest.raises(InputError, match="degenerate"):
        generate(spec(layout="stripes", stripe_width=16))


def test_zero_noise_unit_bias_em_recovers_means_exactly():
    ph = generate(spec())
    res = em_fit(ph.volume, init_kmeans(ph.volume, 3), EmConfig())
    assert np.allclose(res.model.means[:, 0], [100.0, 200.0, 300.0], rtol=0, atol=1e-9)


def test_write_phantom_sidecar(tmp_path):
    ph = generate(spec(bias=random_bias(G, 1, 0.1, 8.0, seed=2), noise_sigma=(3.0,)))
    doc = write_phantom(ph, tmp_path)
    on_disk = json.loads((tmp_path / "phantom.json").read_text())
    assert on_disk["tissues"][1]["mean"] == [200.0]
    for name in doc["files"]["channels"] + doc["files"]["truth_tpms"] + doc["files"]["bias"]:
        assert (tmp_path / name).exists()
