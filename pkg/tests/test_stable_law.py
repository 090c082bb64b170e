"""Sampler and spectral-measure tests, validated through characteristic
functions and Laplace transforms rather than reference samples."""

import numpy as np
import pytest
from scipy.special import gamma as sp_gamma

from stabledens import rng, stable_law as sl


def test_cf_unit_constant_closed_form():
    # for alpha != 1: integral of (1-cos(s))/s^{1+alpha} over s > 0
    for alpha in (0.4, 0.8, 1.2, 1.7):
        ref = sp_gamma(1.0 - alpha) * np.cos(0.5 * np.pi * alpha) / alpha
        if alpha > 1.0:
            # continue Gamma through the pole: Γ(1-a) = Γ(2-a)/(1-a)
            ref = sp_gamma(2.0 - alpha) * np.cos(0.5 * np.pi * alpha) / (
                alpha * (1.0 - alpha))
        assert sl.cf_unit_constant(alpha) == pytest.approx(ref, rel=1e-12)


def test_cf_unit_constant_smooth_through_one():
    assert sl.cf_unit_constant(1.0) == pytest.approx(np.pi / 2.0, rel=1e-12)
    left = sl.cf_unit_constant(1.0 - 1e-9)
    right = sl.cf_unit_constant(1.0 + 1e-9)
    assert left == pytest.approx(right, rel=1e-6)


def test_cf_unit_constant_numeric_quadrature():
    # independent check: brute-force the defining integral after s = v**2,
    # which removes the endpoint singularity trapz cannot absorb
    alpha = 1.5
    v = np.linspace(1e-3, 20.0, 2_000_001)
    integrand = 2.0 * (1.0 - np.cos(v * v)) * v ** (-1.0 - 2.0 * alpha)
    val = np.trapezoid(integrand, v)
    val += 0.5 * (1e-6) ** (2.0 - alpha) / (2.0 - alpha)  # [0, 1e-6] piece
    val += 400.0 ** (-alpha) / alpha  # oscillating tail, mean value
    assert sl.cf_unit_constant(alpha) == pytest.approx(val, rel=1e-4)


N_ECF = 200_000


@pytest.mark.parametrize("alpha", [0.7, 1.0, 1.5, 1.9])
def test_sample_1d_characteristic_function(alpha):
    g = rng.stream(1234, rng.TAG_TESTS, 0)
    x = sl.sample_1d(alpha, N_ECF, g, t=1.0)
    u = np.array([0.25, 0.5, 1.0, 2.0])
    ecf = sl.empirical_cf(x, u)
    ref = np.exp(-np.abs(u) ** alpha)
    assert np.max(np.abs(ecf - ref)) < 4.0 / np.sqrt(N_ECF)


def test_sample_1d_scaling_and_drift():
    g = rng.stream(99, rng.TAG_TESTS, 1)
    alpha, t, c, mu = 1.4, 0.3, 2.0, -1.5
    x = sl.sample_1d(alpha, N_ECF, g, t=t, cf_scale=c, drift=mu)
    u = np.array([0.5, 1.0])
    ecf = sl.empirical_cf(x, u)
    ref = np.exp(-t * c * np.abs(u) ** alpha + 1j * u * mu * t)
    assert np.max(np.abs(ecf - ref)) < 4.0 / np.sqrt(N_ECF)


@pytest.mark.parametrize("ap", [0.35, 0.5, 0.75, 0.95])
def test_one_sided_laplace_transform(ap):
    g = rng.stream(7, rng.TAG_TESTS, 2)
    a = sl.sample_one_sided(ap, N_ECF, g)
    assert np.all(a > 0.0)
    for s in (0.5, 1.0, 3.0):
        got = np.mean(np.exp(-s * a))
        assert got == pytest.approx(np.exp(-s ** ap), abs=4.0 / np.sqrt(N_ECF))


def test_isotropic_sampler_cf_2d():
    alpha, m, t = 1.3, 0.7, 0.8
    spec = sl.StableSpec(alpha, sl.Isotropic(m, dim=2), np.zeros(2))
    g = rng.stream(5, rng.TAG_TESTS, 3)
    x = sl.sample_vector(spec, t, N_ECF, g)
    assert x.shape == (N_ECF, 2)
    u = np.array([[1.0, 0.0], [0.6, -0.8], [0.0, 0.5]])
    ecf = sl.empirical_cf(x, u)
    ref = np.exp(-t * m * np.linalg.norm(u, axis=1) ** alpha)
    assert np.max(np.abs(ecf - ref)) < 4.0 / np.sqrt(N_ECF)


def test_discrete_folds_opposite_atoms():
    d = sl.Discrete(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]),
                    np.array([0.5, 0.25, 1.0]))
    # +e1 and -e1 merge onto the canonical representative
    assert d.directions.shape == (2, 2)
    assert d.masses.sum() == pytest.approx(1.75)
    u = np.array([[0.3, 1.1], [-2.0, 0.4]])
    merged = d.cf_exponent(1.2, u)
    by_hand = (0.75 * np.abs(u[:, 0]) ** 1.2 + np.abs(u[:, 1]) ** 1.2)
    np.testing.assert_allclose(merged, by_hand, rtol=1e-13)


def test_discrete_sampler_cf():
    alpha, t = 1.6, 0.5
    dirs = np.array([[1.0, 0.0], [np.cos(2.0), np.sin(2.0)]])
    masses = np.array([0.8, 0.4])
    spec = sl.StableSpec(alpha, sl.Discrete(dirs, masses), np.zeros(2))
    g = rng.stream(11, rng.TAG_TESTS, 4)
    x = sl.sample_vector(spec, t, N_ECF, g)
    u = np.array([[1.0, 0.2], [-0.4, 0.9]])
    ecf = sl.empirical_cf(x, u)
    ref = np.exp(-t * spec.measure.cf_exponent(alpha, u))
    assert np.max(np.abs(ecf - ref)) < 4.0 / np.sqrt(N_ECF)


def test_spectral_bounds():
    alpha = 1.5
    c1, c2 = sl.OneDim(2.0).spectral_bounds(alpha)
    assert (c1, c2) == (pytest.approx(2.0), pytest.approx(2.0))
    c1, c2 = sl.Isotropic(1.0, dim=2).spectral_bounds(alpha)
    assert c1 == pytest.approx(c2, rel=1e-9)
    # a single atom pair in 2d is degenerate: the orthogonal direction
    # carries no jump activity
    d = sl.Discrete(np.array([[1.0, 0.0]]), np.array([1.0]))
    c1, c2 = d.spectral_bounds(alpha)
    assert c1 < 1e-4 and c2 == pytest.approx(1.0, abs=1e-3)


def test_cf_helper_matches_exponent():
    spec = sl.StableSpec(1.2, sl.OneDim(0.9), np.array([0.3]))
    u = np.array([-1.5, 0.2, 4.0])
    got = sl.cf(spec, 2.0, u)
    ref = np.exp(-2.0 * 0.9 * np.abs(u) ** 1.2 + 1j * u * 0.3 * 2.0)
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_streams_are_reproducible_and_disjoint():
    a = rng.stream(42, rng.TAG_STABLE_LAW, 0).standard_normal(8)
    b = rng.stream(42, rng.TAG_STABLE_LAW, 0).standard_normal(8)
    c = rng.stream(42, rng.TAG_STABLE_LAW, 1).standard_normal(8)
    d = rng.stream(42, rng.TAG_EULER, 0).standard_normal(8)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)
    with pytest.raises(ValueError):
        rng.stream(-1, rng.TAG_TESTS)


def test_sampler_rejects_bad_index():
    g = rng.stream(1, rng.TAG_TESTS, 5)
    with pytest.raises(ValueError):
        sl.sample_1d(2.0, 10, g)
    with pytest.raises(ValueError):
        sl.sample_one_sided(1.0, 10, g)


def test_levy_to_cf_mass_roundtrip():
    # CF mass of a unit Levy-coefficient measure equals C_alpha itself
    for alpha in (0.8, 1.0, 1.5):
        assert sl.levy_to_cf_mass(alpha, 1.0) == pytest.approx(
            sl.cf_unit_constant(alpha), rel=1e-12)
