import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from spdelab.spectral import (
    Collocation,
    SpectralModel,
    c_x,
    check_condition_88,
    eigen_pairs,
    kernel_eval,
    kernel_norm_profile,
    kernel_norm_sq,
)


def test_eigenpairs_1d_ordering():
    model = SpectralModel(1, 4, 1)
    pairs = eigen_pairs(model)
    assert [p[0] for p in pairs] == [(1,), (2,), (3,), (4,)]
    assert pairs[0][1] == pytest.approx(math.pi**2)
    assert pairs[0][2](0.5) == pytest.approx(math.sqrt(2.0))


def test_eigenpairs_2d_ties_lexicographic():
    model = SpectralModel(2, 3, 1)
    idx = [tuple(k) for k in model.indices]
    assert idx[:3] == [(1, 1), (1, 2), (2, 1)]
    assert np.all(np.diff(model.eigenvalues) >= 0)
    assert model.size == 9


def test_noise_weights_and_q():
    model = SpectralModel(1, 5, 2)
    np.testing.assert_allclose(model.noise_weights, (1 + model.eigenvalues) ** -2.0)
    np.testing.assert_allclose(model.q_eigenvalues, model.noise_weights**2)
    with pytest.raises(ValueError):
        model.eigenvalues[0] = 1.0


def test_invalid_model():
    with pytest.raises(ValueError):
        SpectralModel(3, 4, 1)
    with pytest.raises(ValueError):
        SpectralModel(1, 0, 1)
    with pytest.raises(ValueError):
        SpectralModel(1, 4, -1)


@pytest.mark.parametrize("d", [1, 2])
def test_orthonormal_on_grid(d):
    model = SpectralModel(d, 6, 1)
    col = Collocation(model, points_per_axis=64)
    gram = col.basis @ col.basis.T * col.h**d
    assert np.max(np.abs(gram - np.eye(model.size))) < 1e-8


def test_kernel_symmetry_and_heat_flow():
    model = SpectralModel(1, 32, 1)
    x, y = 0.3, 0.71
    assert kernel_eval(model, 0.01, x, y) == pytest.approx(kernel_eval(model, 0.01, y, x), rel=1e-14)
    # semigroup applied to e^1 via quadrature of the kernel
    ys = np.linspace(0, 1, 4001)
    vals = kernel_eval(model, 0.05, x, ys) * np.sqrt(2) * np.sin(np.pi * ys)
    got = integrate.trapezoid(vals, ys)
    assert got == pytest.approx(math.exp(-math.pi**2 * 0.05) * math.sqrt(2) * math.sin(math.pi * x), rel=1e-6)
    with pytest.raises(ValueError):
        kernel_eval(model, 0.0, x, y)


@pytest.mark.parametrize("delta", [1e-3, 0.1, 0.5])
def test_kernel_norm_sq_matches_time_quadrature(delta):
    model = SpectralModel(1, 24, 1)
    x = 0.37
    e2 = model.eigenfunctions(x) ** 2
    q = model.q_eigenvalues
    # independent oracle: integrate sum_k q_k exp(-2 s lam_k) e_k(x)^2 in time
    s = np.linspace(0.0, delta, 10_001)
    integrand = np.exp(-2.0 * np.outer(s, model.eigenvalues)) @ (q * e2)
    ref = integrate.simpson(integrand, x=s)
    assert kernel_norm_sq(model, x, delta) == pytest.approx(ref, rel=1e-6)


def test_kernel_norm_sq_rejects():
    model = SpectralModel(1, 8, 1)
    with pytest.raises(ValueError):
        kernel_norm_sq(model, 0.5, 0.0)
    with pytest.raises(ValueError):
        kernel_norm_sq(model, 1.0, 0.1)


def test_c_x_lower_bound():
    model = SpectralModel(1, 64, 1)
    for x in (0.1, 0.5, 0.83):
        c = c_x(model, x)
        for d in np.geomspace(1e-6, 1.0, 13):
            assert kernel_norm_sq(model, x, d) - c * d >= -1e-12


def test_condition_verdicts():
    model = SpectralModel(1, 64, 1)
    prof = kernel_norm_profile(model, 0.5, np.geomspace(1e-5, 1e-1, 9))
    assert check_condition_88(prof, 0.6).verdict == "PASS"
    assert check_condition_88(prof, 0.5).verdict == "FAIL"
    # a profile growing like delta^2 makes delta^0.6 / sqrt(value) blow up
    fake = type(prof)(prof.x, prof.deltas, prof.deltas**2, prof.c_x)
    assert check_condition_88(fake, 0.6).verdict == "FAIL"
    assert check_condition_88(fake, 0.5).verdict == "FAIL"
    with pytest.raises(ValueError):
        check_condition_88(kernel_norm_profile(model, 0.5, [1e-3, 1e-2]), 0.6)


@pytest.mark.parametrize("method", ["matrix", "dst"])
@pytest.mark.parametrize("d", [1, 2])
def test_collocation_round_trip(method, d):
    model = SpectralModel(d, 5, 1)
    col = Collocation(model, method=method)
    c = np.random.default_rng(0).standard_normal((3, model.size))
    np.testing.assert_allclose(col.from_grid(col.to_grid(c)), c, atol=1e-12)
    np.testing.assert_allclose(col.to_grid(c)[0], c[0] @ model.eigenfunctions(col.nodes).T, atol=1e-12)


def test_cubic_projection_exact():
    model = SpectralModel(1, 6, 1)
    col = Collocation(model)
    c = np.zeros(6)
    c[0] = 0.7
    c[2] = -0.3
    fine = np.linspace(0, 1, 20001)
    u = c @ model.eigenfunctions(fine).T
    ref = integrate.trapezoid(u[:, None] ** 3 * model.eigenfunctions(fine), fine, axis=0)
    np.testing.assert_allclose(col.from_grid(col.to_grid(c) ** 3), ref, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(0.01, 0.99), a=st.floats(1e-5, 0.5), b=st.floats(1e-5, 0.5))
def test_kernel_norm_monotone_in_delta(x, a, b):
    model = SpectralModel(1, 16, 1)
    lo, hi = sorted((a, b))
    assert kernel_norm_sq(model, x, lo) <= kernel_norm_sq(model, x, hi) * (1 + 1e-14)
