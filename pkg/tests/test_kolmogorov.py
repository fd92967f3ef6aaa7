import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from porouslab import spectral
from porouslab._validation import ConventionMismatchError, DimensionError
from porouslab.kolmogorov import (CylinderFunction, apply_N0, calibrate_bias, drift_term, excessivity_check,
                                  feynman_kac_paths, invariance_residual, lyapunov_functional,
                                  martingale_residual, nonnegative_battery, scalar_ou_feynman_kac,
                                  standard_battery)
from porouslab.nonlinearity import PsiSpec
from porouslab.sde import GalerkinSystem, SamplerConfig, lyapunov_integrand, sample_invariant

P3 = PsiSpec("power_odd", m=3)
LIN = PsiSpec("linear", alpha=1.0)
BATTERY4 = standard_battery(4)
coeffs = arrays(float, 4, elements=st.floats(-0.5, 0.5))


def test_battery_shape():
    names = [phi.name for phi in BATTERY4]
    assert len(names) == 14 and len(set(names)) == 14
    assert {phi.p for phi in BATTERY4} == {1, 2, 3}
    assert all(phi.n == 4 for phi in BATTERY4)
    assert all(np.all(phi(np.random.default_rng(0).standard_normal((50, 4))) >= 0)
               for phi in nonnegative_battery(4))


def test_constant_member_is_annihilated():
    const = BATTERY4[0]
    X = np.random.default_rng(1).standard_normal((20, 4))
    assert np.all(apply_N0(const, X, P3, SamplerConfig(n_modes=4)) == 0)


@pytest.mark.parametrize("conv", ["H", "L2"])
def test_ou_generator_oracle(frozen, conv):
    ref = frozen["ou_generator_gaussian_bump"]
    phi = CylinderFunction.from_weights("gaussian_bump", [ref["weights"]], center=(ref["center"],),
                                        width=ref["width"])
    cfg = SamplerConfig(n_modes=3, noise_convention=conv)
    val = apply_N0(phi, np.array(ref["x"]), LIN, cfg)[0]
    assert val == pytest.approx(ref["value"][conv], rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(x=coeffs, h=coeffs)
def test_derivatives_match_finite_differences(x, h):
    for phi in BATTERY4[1:]:
        d1, d2 = phi.directional(x, h)
        s = 1e-4
        fp, f0, fm = phi(x + s * h)[0], phi(x)[0], phi(x - s * h)[0]
        assert d1[0] == pytest.approx((fp - fm) / (2 * s), rel=1e-6, abs=1e-6)
        assert d2[0] == pytest.approx((fp - 2 * f0 + fm) / s**2, rel=1e-5, abs=1e-4)
        # the H-gradient represents D phi
        assert spectral.inner(phi.gradient(x)[0], h) == pytest.approx(d1[0], rel=1e-10, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(x=coeffs)
def test_drift_term_is_derivative_along_drift(x):
    cfg = SamplerConfig(n_modes=4)
    Fx = GalerkinSystem(P3, cfg).drift(x)
    for phi in BATTERY4[1:6]:
        d1, _ = phi.directional(x, Fx)
        assert drift_term(phi, x, P3, cfg)[0] == pytest.approx(d1[0], rel=1e-10, abs=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        apply_N0(BATTERY4[1], np.zeros((2, 5)), P3, SamplerConfig(n_modes=5))


@pytest.fixture(scope="module")
def linear_samples():
    cfg = SamplerConfig(n_modes=4, n_steps=100_000, seed=11)
    return sample_invariant(LIN, cfg), cfg


def test_invariance_linear_surrogate(linear_samples):
    res, cfg = linear_samples
    cal = calibrate_bias(BATTERY4, cfg, draws=200_000)
    rep = invariance_residual(res, BATTERY4, LIN, cfg, bias_constant=cal["C_per_function"])
    assert rep.passed, rep.failures()
    assert rep.rows[0]["estimate"] == 0 and rep.rows[0]["se"] == 0
    assert json.loads(rep.to_json())["verdict"] == "pass"


def test_invariance_negative_control_fails():
    battery = standard_battery(8)
    cfg = SamplerConfig(n_modes=8, n_steps=200, burn_in=0, x0=tuple(1.0 / np.arange(1, 9)))
    cal = calibrate_bias(battery, cfg, draws=200_000)
    rep = invariance_residual(sample_invariant(P3, cfg), battery, P3, cfg, bias_constant=cal["C_per_function"])
    assert not rep.passed


def test_invariance_convention_guard(linear_samples):
    res, cfg = linear_samples
    with pytest.raises(ConventionMismatchError):
        invariance_residual(res, BATTERY4, LIN, SamplerConfig(n_modes=4, noise_convention="L2"))
    header = {"sde.noise_convention": "L2"}
    with pytest.raises(ConventionMismatchError):
        invariance_residual((res.samples, header), BATTERY4, LIN, cfg)


def test_excessivity_linear_stationary(linear_samples):
    res, cfg = linear_samples
    battery = nonnegative_battery(4)
    rep = excessivity_check(res, battery, 0.05, LIN, cfg, restarts=4000)
    assert rep["verdict"] == "pass"
    assert all(r["two_sided_equal"] for r in rep["functions"])
    const = rep["functions"][0]
    assert const["lhs"] == const["rhs"] == 1.0
    loose = excessivity_check(res, battery, 0.05, LIN, cfg, lambda_nu=10.0, restarts=500)
    assert loose["verdict"] == "pass" and not any(r["informative"] for r in loose["functions"][1:])


def test_martingale_zero_time():
    rep = martingale_residual(np.zeros(4), BATTERY4[1], 0.0, 100, P3, SamplerConfig(n_modes=4))
    assert rep["estimate"] == 0 and rep["verdict"] == "pass"


def test_martingale_linear_oracle():
    cfg = SamplerConfig(n_modes=4, dt=1e-3)
    phi = CylinderFunction.from_weights("gaussian_bump", [[0.3, -0.2, 0.1, 0.05]], center=(0.05,), width=0.4)
    rep = martingale_residual(np.array([0.2, -0.1, 0.05, 0.0]), phi, 0.1, 10_000, LIN, cfg)
    assert abs(rep["estimate"]) <= 3 * rep["se"]


def test_martingale_rejects_small_ensemble():
    with pytest.raises(ValueError):
        martingale_residual(np.zeros(4), BATTERY4[1], 0.1, 50, P3, SamplerConfig(n_modes=4))


def test_feynman_kac_scalar_ou(frozen):
    ref = frozen["scalar_ou_feynman_kac"]
    assert scalar_ou_feynman_kac(ref["x"], np.pi**2, 1.0, 0.5 + np.pi**2, ref["t_max"]) == pytest.approx(
        ref["continuous"], rel=1e-10)
    cfg = SamplerConfig(n_modes=1, dt=ref["dt"])
    domain = cfg.domain
    per = feynman_kac_paths([[ref["x"]]], LIN, cfg, lambda Z: lyapunov_integrand(Z, LIN, domain),
                            ref["t_max"], 2000)
    est, se = per.mean(), per.std(ddof=1) / np.sqrt(per.size)
    assert abs(est - ref["discrete"]) <= 3 * se
    assert abs(est - ref["continuous"]) <= 3 * se + 0.01 * ref["continuous"]


def test_feynman_kac_zero_state_without_noise():
    cfg = SamplerConfig(n_modes=3, dt=1e-2)
    per = feynman_kac_paths(np.zeros((1, 3)), P3, cfg, lambda Z: lyapunov_integrand(Z, P3, cfg.domain), 5.0, 4,
                            noise_scale=0.0)
    assert np.all(per == 0)


def test_lyapunov_excludes_zero_state_and_requires_r():
    cfg = SamplerConfig(n_modes=3, dt=1e-2)
    X = np.vstack([np.zeros(3), [0.3, 0.1, -0.1], [-0.2, 0.0, 0.1]])
    rep = lyapunov_functional(X, P3, cfg, t_max=5.0, paths=8, n_boot=200)
    assert rep["excluded_zero_states"] == 1 and rep["ratio"].size == 2 and rep["verdict"] == "pass"
    with pytest.raises(ValueError):
        lyapunov_functional(X, PsiSpec("power_odd", m=1), cfg, t_max=5.0)
    with pytest.raises(ValueError):
        lyapunov_functional(X, P3, cfg, t_max=4.0)
