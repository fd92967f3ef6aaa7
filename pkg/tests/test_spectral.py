import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from porouslab import spectral
from porouslab._validation import DimensionError
from porouslab.spectral import CovarianceSpec, DomainSpec, SpectralProjector

finite = st.floats(-10, 10, allow_nan=False)


def e_k(k, domain):
    return np.sqrt(2 / domain.length) * np.sin(k * np.pi * domain.nodes / domain.length)


@pytest.mark.parametrize("fast", [False, True])
def test_forward_unit_mode(fast):
    d = DomainSpec(1.0, 63)
    x = spectral.dst_forward(e_k(3, d), d, 8, fast=fast)
    np.testing.assert_allclose(x, np.eye(8)[2], atol=1e-12)


def test_forward_zero():
    d = DomainSpec(1.0, 63)
    assert np.all(spectral.dst_forward(np.zeros(63), d, 8) == 0)


@pytest.mark.parametrize("fast", [False, True])
def test_forward_matches_direct_quadrature(frozen, fast):
    d = DomainSpec(1.0, 63)
    g = 2 * e_k(1, d) - 0.5 * e_k(4, d)
    np.testing.assert_allclose(spectral.dst_forward(g, d, 8, fast=fast), frozen["dst_2e1_minus_half_e4"],
                               atol=1e-12)


def test_inverse_closed_form(frozen):
    d = DomainSpec(1.0, 3)
    np.testing.assert_allclose(spectral.dst_inverse([1.0], d), frozen["inverse_M3_e1"], atol=1e-14)
    assert np.all(spectral.dst_inverse(np.zeros(3), d) == 0)


@pytest.mark.parametrize("M,n", [(16, 16), (31, 8), (64, 5), (129, 129)])
def test_round_trip_seeded(M, n):
    d = DomainSpec(1.3, M)
    rng = np.random.default_rng(M)
    for _ in range(100):
        x = rng.standard_normal(n)
        for fast in (False, True):
            back = spectral.dst_forward(spectral.dst_inverse(x, d, fast), d, n, fast)
            np.testing.assert_allclose(back, x, atol=1e-12)


def test_fast_and_direct_agree():
    d = DomainSpec(2.0, 40)
    g = np.random.default_rng(1).standard_normal((5, 40))
    np.testing.assert_allclose(spectral.dst_forward(g, d, 40, True), spectral.dst_forward(g, d, 40, False),
                               atol=1e-12)


def test_dimension_errors():
    d = DomainSpec(1.0, 8)
    with pytest.raises(DimensionError):
        spectral.dst_forward(np.zeros(7), d, 4)
    with pytest.raises(DimensionError):
        spectral.dst_forward(np.zeros(8), d, 9)


def test_norms_of_e1():
    x = np.eye(4)[0]
    assert spectral.norm(x, "L2") == pytest.approx(1.0)
    assert spectral.norm(x, "H10") == pytest.approx(np.pi)
    assert spectral.norm(x, "Hminus1") == pytest.approx(1 / np.pi)
    for which in spectral.NORMS:
        assert spectral.norm(np.zeros(4), which) == 0


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.integers(1, 20), elements=finite))
def test_poincare_ordering(x):
    h = spectral.norm(x, "Hminus1")
    l2 = spectral.norm(x, "L2")
    h1 = spectral.norm(x, "H10")
    assert h <= l2 / np.pi * (1 + 1e-12) + 1e-300
    assert l2 / np.pi <= h1 / np.pi**2 * (1 + 1e-12) + 1e-300


def test_laplacian_is_h_riesz_map():
    # <-Delta x, y>_H = <x, y>_{L2}
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 10, 12))
    mu = spectral.eigenvalues(12, 0.7)
    np.testing.assert_allclose(spectral.inner(mu * x, y, "Hminus1", 0.7), spectral.inner(x, y, "L2", 0.7))


def test_covariance_sqrt():
    cov = CovarianceSpec(1.0, 1.0)
    assert spectral.covariance_sqrt_apply(np.eye(3)[0], cov)[0] == pytest.approx(1 / np.pi)
    assert np.all(spectral.covariance_sqrt_apply(np.zeros(3), cov) == 0)
    lam = 1.0 / (np.arange(1, 33) * np.pi) ** 2
    twice = spectral.covariance_sqrt_apply(spectral.covariance_sqrt_apply(np.ones(32), cov), cov)
    np.testing.assert_allclose(twice, lam, rtol=1e-14)


@pytest.mark.parametrize("gamma", [0.6, 0.8, 1.0])
def test_trace_constant_tail_bound(gamma):
    cov = CovarianceSpec(gamma, 1.0)
    gap = cov.K() - cov.partial_K(500)
    assert 0 < gap <= cov.K_tail_bound(500)


def test_covariance_rejects_gamma():
    with pytest.raises(ValueError):
        CovarianceSpec(0.5)


def test_stencil_eigenvalues_converge():
    d = DomainSpec(1.0, 255)
    lam_h = spectral.stencil_eigenvalues(d)[:4]
    np.testing.assert_allclose(lam_h, spectral.eigenvalues(4), rtol=1e-3)
    assert np.all(lam_h < spectral.eigenvalues(4))


def test_grid_h_norm_matches_spectral_for_low_modes():
    d = DomainSpec(1.0, 511)
    x = np.array([0.4, -0.2, 0.1])
    g = spectral.dst_inverse(x, d)
    assert spectral.grid_h_norm(g, d) == pytest.approx(spectral.norm(x), rel=1e-4)


def test_project():
    x = np.arange(1.0, 6.0)
    np.testing.assert_array_equal(spectral.project(x, 2), [1, 2, 0, 0, 0])


def test_projector_estimator():
    d = DomainSpec(1.0, 32)
    X = np.vstack([e_k(1, d), e_k(2, d)])
    proj = SpectralProjector(n_modes=4, fast=True).fit(X)
    np.testing.assert_allclose(proj.transform(X), np.eye(4)[:2], atol=1e-12)
    np.testing.assert_allclose(proj.inverse_transform(np.eye(4)[:2]), X, atol=1e-12)
    assert clone(proj).get_params() == {"n_modes": 4, "length": 1.0, "fast": True}
    with pytest.raises(DimensionError):
        SpectralProjector(n_modes=40).fit(X)
