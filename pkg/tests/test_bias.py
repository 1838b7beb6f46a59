import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvseg.bias import (
    BiasField,
    ResidualField,
    axis_basis,
    bspline_kernel,
    compute_residuals,
    correct_channels,
    evaluate_bias,
    fit_bspline,
    lattice_dims,
)
from mvseg.errors import InputError, NumericalError
from mvseg.mixture import MixtureModel, NormalComponent, ResponsibilityStack
from mvseg.phantom import direct_bias, random_bias
from mvseg.volume import GridGeometry, MultichannelVolume

GEOM = GridGeometry((20, 17, 9), (2.0, 2.5, 3.0))


def residuals(values, geom=GEOM, weights=None):
    values = np.atleast_1d(values) if np.ndim(values) == 4 else np.asarray(values)[None]
    w = np.ones(geom.dims) if weights is None else weights
    return ResidualField(geom, values, w)


def cubic_closed_form(t):
    t = abs(t)
    if t < 1:
        return (4 - 6 * t**2 + 3 * t**3) / 6
    if t < 2:
        return (2 - t) ** 3 / 6
    return 0.0


def quadratic_closed_form(t):
    t = abs(t)
    if t < 0.5:
        return 0.75 - t**2
    if t < 1.5:
        return 0.5 * (1.5 - t) ** 2
    return 0.0


@pytest.mark.parametrize("order,ref", [(3, cubic_closed_form), (2, quadratic_closed_form)])
def test_kernel_closed_form_and_partition_of_unity(order, ref):
    t = np.linspace(-3, 3, 601)
    assert np.allclose(bspline_kernel(t, order), [ref(v) for v in t], atol=1e-15)
    u = np.linspace(0, 5, 101)
    total = sum(bspline_kernel(u - l, order) for l in range(-3, 9))
    assert np.allclose(total, 1.0, atol=1e-14)


def test_lattice_fits_domain_with_guard_points():
    dims, spacing = lattice_dims(GEOM, 15.0)
    # extents 38, 40, 24 mm -> 3, 3, 2 spans
    assert dims == (6, 6, 5)
    assert spacing == pytest.approx((38 / 3, 40 / 3, 12.0))
    for n, vs, cs in zip(GEOM.dims, GEOM.spacing, spacing):
        assert cs <= 15.0 and (n - 1) * vs == pytest.approx(round((n - 1) * vs / cs) * cs)


def test_zero_coefficients_give_zero_field():
    bf = BiasField.zeros(GEOM, 2, 15.0)
    for f in evaluate_bias(bf, GEOM):
        assert np.all(f.values == 0.0)
    for f in evaluate_bias(bf, GEOM, multiplicative=True):
        assert np.all(f.values == 1.0)


@pytest.mark.parametrize("order", [2, 3])
def test_single_coefficient_is_tensor_bump(order):
    bf0 = BiasField.zeros(GEOM, 1, 15.0, order)
    c = np.zeros(bf0.lattice)
    c[2, 3, 1] = 1.0
    bf = BiasField(bf0.lattice, bf0.control_spacing, bf0.origin, (c,), order)
    f = evaluate_bias(bf, GEOM)[0].values
    ref = cubic_closed_form if order == 3 else quadratic_closed_form
    for idx in [(0, 0, 0), (5, 7, 3), (11, 12, 4), (19, 16, 8)]:
        want = 1.0
        for ax, (i, l) in enumerate(zip(idx, (2, 3, 1))):
            want *= ref(i * GEOM.spacing[ax] / bf.control_spacing[ax] - (l - 1))
        assert f[idx] == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("order", [2, 3])
def test_evaluation_matches_independent_direct_summation(order):
    bf = random_bias(GEOM, 2, 0.3, 15.0, order, seed=11)
    a = np.stack([v.values for v in evaluate_bias(bf, GEOM)])
    assert np.abs(a - direct_bias(bf, GEOM)).max() < 1e-9


@pytest.mark.parametrize("order", [2, 3])
def test_constant_reproduced(order):
    fit = fit_bspline(residuals(np.full(GEOM.dims, 0.37)), 15.0, order)
    assert np.abs(evaluate_bias(fit, GEOM)[0].values - 0.37).max() < 1e-9


def test_linear_ramp_reproduced():
    x, y, z = np.meshgrid(*[np.arange(n) * s for n, s in zip(GEOM.dims, GEOM.spacing)], indexing="ij")
    ramp = 0.01 * x - 0.003 * y + 0.02 * z + 0.1
    fit = fit_bspline(residuals(ramp), 15.0, 3)
    f = evaluate_bias(fit, GEOM)[0].values
    assert np.abs(f - ramp)[1:-1, 1:-1, 1:-1].max() < 1e-6


@pytest.mark.parametrize("order", [2, 3])
def test_coefficient_roundtrip(order):
    bf = random_bias(GEOM, 1, 0.2, 15.0, order, seed=3)
    truth = evaluate_bias(bf, GEOM)[0].values
    fit = fit_bspline(residuals(truth), 15.0, order)
    assert np.abs(fit.coefficients[0] - bf.coefficients[0])[1:-1, 1:-1, 1:-1].max() < 1e-6
    assert np.abs(evaluate_bias(fit, GEOM)[0].values - truth).max() < 1e-5


def test_fit_is_idempotent_projection(rng):
    noise = rng.normal(size=GEOM.dims)
    fit1 = fit_bspline(residuals(noise), 15.0)
    f1 = evaluate_bias(fit1, GEOM)[0].values
    fit2 = fit_bspline(residuals(f1), 15.0)
    assert np.abs(fit2.coefficients[0] - fit1.coefficients[0]).max() < 1e-9


def test_channel_independence(rng):
    a, b = rng.normal(size=GEOM.dims), rng.normal(size=GEOM.dims)
    f1 = fit_bspline(residuals(np.stack([a, b])), 15.0)
    f2 = fit_bspline(residuals(np.stack([a, 2 * b + 1])), 15.0)
    assert np.array_equal(f1.coefficients[0], f2.coefficients[0])


def test_masked_fit_ignores_outside_and_stays_finite(rng):
    w = np.zeros(GEOM.dims)
    w[5:15, 4:12, 2:7] = 1.0
    vals = np.where(w > 0, 0.2, rng.normal(0, 100, GEOM.dims))
    fit = fit_bspline(residuals(vals, weights=w), 15.0)
    f = evaluate_bias(fit, GEOM)[0].values
    assert np.all(np.isfinite(f))
    assert np.abs(f[w > 0] - 0.2).max() < 1e-9


def test_fit_errors():
    with pytest.raises(NumericalError):
        fit_bspline(residuals(np.zeros(GEOM.dims), weights=np.zeros(GEOM.dims)), 15.0)
    with pytest.raises(InputError):
        fit_bspline(residuals(np.zeros(GEOM.dims)), 1.0)
    with pytest.raises(InputError):
        fit_bspline(residuals(np.zeros(GEOM.dims)), 15.0, order=4)


def test_geometry_outside_support():
    bf = BiasField.zeros(GEOM, 1, 15.0)
    with pytest.raises(InputError):
        evaluate_bias(bf, GridGeometry((40, 17, 9), GEOM.spacing, GEOM.origin))


def test_smoothness_bound():
    bf = random_bias(GEOM, 1, 0.2, 15.0, 3, seed=8)
    f = evaluate_bias(bf, GEOM)[0].values
    d2 = np.abs(np.diff(f, 2, axis=0)).max()
    # second difference of the cubic basis along x is at most (h/cs)^2 per unit coefficient
    h = GEOM.spacing[0] / bf.control_spacing[0]
    bound = np.abs(bf.coefficients[0]).max() * 4 * h**2 * 2
    assert d2 <= bound


def _simple_model():
    return MixtureModel((NormalComponent([10.0], [[1.0]]), NormalComponent([20.0], [[1.0]])), np.array([0.5, 0.5]))


def _stack(mv, gamma):
    return ResponsibilityStack.from_masked(mv, gamma)


def test_residuals_zero_and_constant_bias(rng):
    g = GridGeometry((6, 5, 4))
    gamma = rng.random(g.n_voxels)
    gamma = np.stack([gamma, 1 - gamma])
    recon = gamma[0] * 10 + gamma[1] * 20
    from mvseg.volume import unflatten

    mv = MultichannelVolume.from_arrays([unflatten(recon, g.dims)], g)
    res = compute_residuals(mv, _simple_model(), _stack(mv, gamma))
    assert np.abs(res.residuals).max() < 1e-14
    mv2 = MultichannelVolume.from_arrays([unflatten(recon * 1.3, g.dims)], g)
    res = compute_residuals(mv2, _simple_model(), _stack(mv2, gamma))
    assert np.allclose(res.residuals, np.log(1.3), atol=1e-14)


def test_residuals_reject_non_positive():
    g = GridGeometry((2, 1, 1))
    mv = MultichannelVolume.from_arrays([np.array([1.0, -1.0]).reshape(g.dims)], g)
    with pytest.raises(InputError, match="shift"):
        compute_residuals(mv, _simple_model(), _stack(mv, np.array([[1.0, 1.0], [0.0, 0.0]])))


def test_correct_channels_inverse(rng):
    bf = random_bias(GEOM, 1, 0.2, 15.0, 3, seed=5)
    clean = rng.uniform(50, 150, GEOM.dims)
    biased = clean * evaluate_bias(bf, GEOM, multiplicative=True)[0].values
    out = correct_channels(MultichannelVolume.from_arrays([biased], GEOM), bf)
    assert np.allclose(out.channels[0].values, clean, rtol=1e-6, atol=0)
    ident = correct_channels(MultichannelVolume.from_arrays([clean], GEOM), BiasField.zeros(GEOM, 1, 15.0))
    assert np.allclose(ident.channels[0].values, clean, rtol=1e-15)


def test_bias_dict_roundtrip():
    bf = random_bias(GEOM, 2, 0.2, 15.0, 2, seed=1)
    back = BiasField.from_dict(bf.to_dict())
    assert back.lattice == bf.lattice and back.order == 2
    for a, b in zip(back.coefficients, bf.coefficients):
        assert np.array_equal(a, b)


def test_evaluate_bias_masked_zero_outside_and_no_overflow():
    bf = BiasField.zeros(GEOM, 1, control_spacing=15.0)
    coef = np.zeros(bf.lattice)
    coef[-1, -1, -1] = 5000.0  # extrapolation far from the mask overflows exp
    bf = BiasField(bf.lattice, bf.control_spacing, bf.origin, (coef,), bf.order)
    mask = np.zeros(GEOM.dims, dtype=bool)
    mask[:5, :5, :3] = True
    log_f = evaluate_bias(bf, GEOM, mask=mask)[0].values
    full = evaluate_bias(bf, GEOM)[0].values
    np.testing.assert_array_equal(log_f[mask], full[mask])
    assert np.all(log_f[~mask] == 0)
    with np.errstate(over="raise"):
        mult = evaluate_bias(bf, GEOM, multiplicative=True, mask=mask)[0].values
    np.testing.assert_allclose(mult[mask], np.exp(full[mask]))
    assert np.all(mult[~mask] == 0)
    with pytest.raises(InputError):
        evaluate_bias(bf, GEOM, mask=mask[:, :, :1])
