import numpy as np
import pytest
import scipy.stats
from sklearn.base import clone

from porouslab import spectral
from porouslab._validation import ConfigError, SolverError
from porouslab.dissipative import ResolventConfig
from porouslab.nonlinearity import PsiSpec
from porouslab.sde import (ChainState, GalerkinSystem, InvariantMeasureSampler, SamplerConfig, ball_frequency,
                           batch_means, conventions_agree, make_rng, moment_observables, moment_report,
                           noise_amplitudes, ou_discrete_variance, read_samples, sample_invariant, scalar_drift,
                           scalar_stationary_density, simulate_paths, step, wilson_interval, write_samples)
from porouslab.spectral import DomainSpec

P3 = PsiSpec("power_odd", m=3)
LIN = PsiSpec("linear", alpha=1.0)


def test_noise_amplitudes():
    np.testing.assert_array_equal(noise_amplitudes(SamplerConfig(n_modes=5)), np.ones(5))
    sig = noise_amplitudes(SamplerConfig(n_modes=5, noise_convention="L2_cylindrical"))
    assert sig[0] == pytest.approx(1 / np.pi)
    assert not conventions_agree(SamplerConfig(n_modes=16)).any()


@pytest.mark.parametrize("kw", [dict(grid_points=7, n_modes=2), dict(dt=0.0), dict(n_steps=10, burn_in=10),
                                dict(noise_convention="white"), dict(gamma=0.5), dict(x0=(1.0,), n_modes=2)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SamplerConfig(**kw)


def test_config_defaults():
    cfg = SamplerConfig(n_modes=6, n_steps=1000, noise_convention="H_cylindrical")
    assert cfg.grid_points == 24 and cfg.burn_in == 200 and cfg.noise_convention == "H"
    assert cfg.retained == 800


def test_zero_noise_fixed_point():
    cfg = SamplerConfig(n_modes=4)
    Y = np.zeros((1, 4))
    GalerkinSystem(P3, cfg).advance(Y, np.zeros((10, 1, 4)))
    assert np.all(Y == 0)


def test_zero_noise_dissipative_decay():
    cfg = SamplerConfig(n_modes=6, dt=1e-3)
    Y = np.array([[1.0, -0.5, 0.3, 0.2, -0.1, 0.05]])
    sys_ = GalerkinSystem(P3, cfg)
    norms = [spectral.norm(Y[0])]
    for _ in range(1000):
        sys_.advance(Y, np.zeros((1, 1, 6)))
        norms.append(spectral.norm(Y[0]))
    assert np.all(np.diff(norms) < 0)


def test_linear_step_closed_form():
    cfg = SamplerConfig(n_modes=5, dt=1e-2, noise_convention="L2")
    x = np.array([0.3, -0.2, 0.1, 0.05, 0.0])
    state = ChainState(x.copy(), 0, make_rng(9, 0))
    eta = make_rng(9, 0).standard_normal(5)
    new = step(LIN, state, cfg)
    mu = spectral.eigenvalues(5)
    expect = (x + np.sqrt(cfg.dt) * noise_amplitudes(cfg) * eta) / (1 + cfg.dt * mu)
    np.testing.assert_allclose(new.coeffs, expect, rtol=1e-12, atol=1e-15)
    assert new.step == 1


def test_solver_failure_carries_step():
    cfg = SamplerConfig(n_modes=4, dt=10.0)
    state = ChainState(np.full(4, 50.0), 7, make_rng(0, 0))
    with pytest.raises(SolverError) as info:
        step(P3, state, cfg, ResolventConfig(newton_tol=1e-300, max_iter=1))
    assert info.value.step == 8


def test_ou_variance_formula(frozen):
    mu = spectral.eigenvalues(8)
    np.testing.assert_allclose(ou_discrete_variance(1.0, mu, np.ones(8), 1e-3),
                               frozen["ou_discrete_variance_dt1e-3"], rtol=1e-12)


def test_linear_chain_variances_short_run():
    cfg = SamplerConfig(n_modes=8, n_steps=100_000, seed=3)
    res = sample_invariant(LIN, cfg)
    m2, se = batch_means(res.samples**2)
    exact = ou_discrete_variance(1.0, spectral.eigenvalues(8), noise_amplitudes(cfg), cfg.dt)
    assert np.all(np.abs(m2 - exact) <= 3 * se)


def test_scalar_drift_and_density(frozen):
    ref = frozen["scalar_density_power3"]
    b = scalar_drift(P3)
    np.testing.assert_allclose(b(np.array([0.5, -1.0])), ref["drift_coefficient"] * np.array([0.125, -1.0]),
                               rtol=1e-10)
    c, pdf, cdf = scalar_stationary_density(P3, 1.0)
    np.testing.assert_allclose(np.interp(ref["points"], c, cdf), ref["cdf"], atol=1e-6)


def test_scalar_density_ks_short_run():
    cfg = SamplerConfig(n_modes=1, dt=1e-3, n_steps=250_000, burn_in=50_000, thinning=10, seed=5)
    res = sample_invariant(P3, cfg)
    c, _, cdf = scalar_stationary_density(P3, 1.0)
    ks = scipy.stats.kstest(res.samples[:, 0], lambda v: np.interp(v, c, cdf)).statistic
    assert ks <= 0.05


def test_determinism_and_streams():
    cfg = SamplerConfig(n_modes=4, n_steps=2000, seed=1)
    a, b = sample_invariant(P3, cfg), sample_invariant(P3, cfg)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.steps, b.steps)
    c = sample_invariant(P3, SamplerConfig(n_modes=4, n_steps=2000, seed=1, chain_index=1))
    assert not np.array_equal(a.samples, c.samples)


def test_simulate_paths_block_independent():
    cfg = SamplerConfig(n_modes=3, dt=1e-2)
    X0 = np.zeros((50, 3))
    a = simulate_paths(P3, cfg, X0, 20, block_paths=1024)
    b = simulate_paths(P3, cfg, X0, 20, block_paths=1024)
    assert np.array_equal(a, b)


def test_moments_of_zero_and_e1(frozen):
    d = DomainSpec(1.0, 4097)
    obs = moment_observables(np.zeros((3, 4)), P3, d)
    assert all(np.all(v == 0) for v in obs.values())
    one = moment_observables(np.eye(4)[:1], P3, d)
    assert one["grad_psi_sq"][0] == pytest.approx(frozen["grad_psi_sq_e1_power3"], rel=1e-10)
    assert one["phi"][0] == pytest.approx(frozen["phi_e1_power3"], rel=1e-10)


def test_moment_doubling_check():
    cfg = SamplerConfig(n_modes=4, n_steps=100_000, seed=2)
    res = sample_invariant(P3, cfg)
    rep = moment_report(res.samples, P3, cfg.domain)
    assert all(v["stable"] for v in rep.values())
    assert set(rep) == {"grad_psi_sq", "grad_power_sq", "l2r", "h_2r", "phi"}


def test_ball_frequency_trivial_cases():
    X = np.random.default_rng(0).standard_normal((500, 3))
    assert ball_frequency(X, X.mean(axis=0), 1e6)["frequency"] == 1
    zero = ball_frequency(X, X.mean(axis=0), 0.0)
    assert zero["hits"] == 0 and zero["ci_low"] == 0
    freqs = [ball_frequency(X, np.zeros(3), r)["frequency"] for r in (0.5, 0.3, 0.2, 0.1)]
    assert np.all(np.diff(freqs) <= 0)


def test_ball_frequency_matches_gaussian_oracle(frozen):
    ref = frozen["gaussian_ball_linear"]
    cfg = SamplerConfig(n_modes=ref["n"], dt=ref["dt"], n_steps=420_000, burn_in=20_000, thinning=20, seed=8)
    rep = ball_frequency(sample_invariant(LIN, cfg).samples, np.zeros(ref["n"]), ref["radius"])
    assert rep["ci_low"] <= ref["probability"] <= rep["ci_high"]


def test_wilson_boundaries():
    assert wilson_interval(0, 100)[0] == 0.0
    assert wilson_interval(100, 100)[1] == 1.0
    lo, hi = wilson_interval(30, 100)
    assert lo < 0.3 < hi


def test_batch_means_iid():
    x = np.random.default_rng(4).standard_normal(64_000)
    mean, se = batch_means(x)
    assert se == pytest.approx(1 / np.sqrt(64_000), rel=0.3)


def test_csv_round_trip(tmp_path):
    cfg = SamplerConfig(n_modes=3, n_steps=500, seed=4, noise_convention="L2")
    res = sample_invariant(P3, cfg)
    path = tmp_path / "s.csv"
    write_samples(path, res)
    steps, X, header = read_samples(path)
    assert np.array_equal(X, res.samples) and np.array_equal(steps, res.steps)
    assert header["sde.noise_convention"] == "L2" and header["psi.kind"] == "power_odd"
    assert "rng.algorithm" in header
    assert path.read_text().splitlines()[len(header) + 1] == "step,x1,x2,x3"


def test_sampler_estimator():
    est = InvariantMeasureSampler(n_modes=3, n_steps=1000, seed=3)
    assert clone(est).get_params()["n_steps"] == 1000
    est.fit()
    assert est.samples_.shape == (800, 3)
    assert set(est.score_samples(est.samples_[:2])) >= {"phi", "grad_psi_sq"}
    assert est.energy(est.samples_[:2]).shape == (2,)
    assert est.ball_frequency(np.zeros(3), 10.0)["frequency"] == 1
