"""Galerkin sampling of the invariant measure of the n-mode system.

The chain lives on the span of ``e_1..e_n`` and advances by the
drift-implicit Euler step

    xi_{k+1} = (I - dt F_n)^{-1} (xi_k + sqrt(dt) sum_k sigma_k eta_k e_k),

``F_n = P_n Delta Psi`` with ``Psi(x)`` evaluated on the ``M``-node grid.
Each step is a strictly convex minimization solved by damped Newton in the
compiled kernel.

Random numbers come from numpy's Philox4x64-10 bit generator keyed by
``SeedSequence([seed, stream])``; one stream per chain (or per block of
ensemble paths), so results do not depend on how many threads run.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy.integrate import cumulative_trapezoid
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from statsmodels.stats.proportion import proportion_confint

from porouslab import spectral
from porouslab._kernels import galerkin_advance
from porouslab._validation import ConfigError, SolverError
from porouslab.dissipative import ResolventConfig
from porouslab.nonlinearity import PsiSpec, lp_norm_power, phi_energy, psi_antiderivative, psi_eval
from porouslab.spectral import CovarianceSpec, DomainSpec

__all__ = [
    "SamplerConfig",
    "ChainState",
    "EnsembleStats",
    "SampleSet",
    "GalerkinSystem",
    "RNG_ALGORITHM",
    "make_rng",
    "noise_amplitudes",
    "conventions_agree",
    "initial_state",
    "step",
    "sample_invariant",
    "simulate_paths",
    "batch_means",
    "ensemble_stats",
    "moment_observables",
    "moment_report",
    "lyapunov_integrand",
    "ball_frequency",
    "wilson_interval",
    "ou_discrete_variance",
    "scalar_drift",
    "scalar_stationary_density",
    "write_samples",
    "read_samples",
    "InvariantMeasureSampler",
    "set_threads",
]

RNG_ALGORITHM = "numpy.random.Philox (Philox4x64-10), SeedSequence([seed, stream])"

_CONVENTIONS = {"H": "H", "H_cylindrical": "H", "L2": "L2", "L2_cylindrical": "L2"}


def set_threads(n: int | None):
    """Cap compiled-kernel worker threads; results never depend on it."""
    if n is None:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class SamplerConfig:
    """Discretization, noise and seed parameters of a Galerkin chain.

    ``grid_points`` defaults to ``4 n_modes`` (no aliasing of cubic
    nonlinearities), ``burn_in`` to 20% of ``n_steps``.
    """

    n_modes: int = 8
    grid_points: int | None = None
    length: float = 1.0
    dt: float = 1e-3
    n_steps: int = 100_000
    burn_in: int | None = None
    thinning: int = 1
    seed: int = 42
    noise_convention: str = "H"
    gamma: float = 1.0
    x0: tuple | None = None
    chain_index: int = 0

    def __post_init__(self):
        if self.n_modes < 1:
            raise ConfigError("n_modes must be at least 1")
        if self.grid_points is None:
            object.__setattr__(self, "grid_points", 4 * self.n_modes)
        if self.grid_points < 4 * self.n_modes:
            raise ConfigError(f"grid_points={self.grid_points} must be >= 4 n_modes = {4 * self.n_modes}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be positive")
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.n_steps // 5)
        if not 0 <= self.burn_in < self.n_steps:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < n_steps")
        if self.thinning < 1:
            raise ConfigError("thinning must be at least 1")
        if self.noise_convention not in _CONVENTIONS:
            raise ConfigError(f"noise_convention must be one of {sorted(_CONVENTIONS)}")
        object.__setattr__(self, "noise_convention", _CONVENTIONS[self.noise_convention])
        if not 0.5 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (1/2, 1]")
        if self.x0 is not None:
            x0 = tuple(float(v) for v in self.x0)
            if len(x0) != self.n_modes:
                raise ConfigError("x0 must have n_modes coefficients")
            object.__setattr__(self, "x0", x0)

    @property
    def domain(self) -> DomainSpec:
        return DomainSpec(self.length, self.grid_points)

    @property
    def covariance(self) -> CovarianceSpec:
        return CovarianceSpec(self.gamma, self.length)

    @property
    def retained(self) -> int:
        return len(range(self.burn_in + self.thinning, self.n_steps + 1, self.thinning))

    def to_config(self) -> dict:
        out = {f"sde.{k}": v for k, v in asdict(self).items() if v is not None}
        if self.x0 is not None:
            out["sde.x0"] = ",".join(repr(v) for v in self.x0)
        return out


@dataclass
class ChainState:
    coeffs: np.ndarray
    step: int
    rng: np.random.Generator


@dataclass
class EnsembleStats:
    names: list
    count: int
    mean: np.ndarray
    variance: np.ndarray
    se: np.ndarray

    def as_dict(self):
        return {n: {"mean": float(m), "variance": float(v), "se": float(s)}
                for n, m, v, s in zip(self.names, self.mean, self.variance, self.se)} | {"count": self.count}


@dataclass
class SampleSet:
    samples: np.ndarray
    steps: np.ndarray
    config: SamplerConfig
    psi: PsiSpec
    stats: EnsembleStats | None = None
    metadata: dict = field(default_factory=dict)


def noise_amplitudes(cfg: SamplerConfig) -> np.ndarray:
    """Per-mode noise amplitude on L2 coefficients.

    ``H``: cylindrical noise in H along ``sqrt(mu_k) e_k``, so
    ``sigma_k = sqrt(lambda_k mu_k) = mu_k^((1 - gamma)/2)``.
    ``L2``: cylindrical noise along ``e_k``, ``sigma_k = mu_k^(-gamma/2)``.
    """
    mu = spectral.eigenvalues(cfg.n_modes, cfg.length)
    if cfg.noise_convention == "H":
        return mu ** ((1.0 - cfg.gamma) / 2.0)
    return mu ** (-cfg.gamma / 2.0)


def conventions_agree(cfg: SamplerConfig) -> np.ndarray:
    """Modes on which both conventions give the same amplitude (``mu_k == 1``)."""
    return spectral.eigenvalues(cfg.n_modes, cfg.length) == 1.0


class GalerkinSystem:
    """Precomputed data for the n-mode drift-implicit step."""

    def __init__(self, psi: PsiSpec, cfg: SamplerConfig, rcfg: ResolventConfig = ResolventConfig()):
        self.psi = psi
        self.cfg = cfg
        self.rcfg = rcfg
        self.domain = cfg.domain
        n, M = cfg.n_modes, cfg.grid_points
        self.n = n
        self.mu = spectral.eigenvalues(n, cfg.length)
        self.sigma = noise_amplitudes(cfg)
        self.S = np.ascontiguousarray(spectral.basis_matrix(self.domain, n))
        q = np.arange(2 * n + 1)
        j = np.arange(1, M + 1)
        self.Ctab = np.ascontiguousarray(np.cos(np.pi * np.outer(q, j) / (M + 1)))
        self._args = psi.kernel_args()

    def advance(self, Y, normals, dt=None, record=False, scale=None):
        """Advance chains ``Y`` (P, n) in place using standard normals (S, P, n).

        ``scale`` overrides ``sqrt(dt) sigma`` (e.g. zero noise).
        """
        dt = self.cfg.dt if dt is None else dt
        if scale is None:
            scale = np.sqrt(dt) * self.sigma
        noise = np.ascontiguousarray(normals * scale)
        out = np.empty(noise.shape if record else (1, 1, 1))
        worst, iters = galerkin_advance(
            Y, noise, dt, self.mu, self.S, self.Ctab, 1.0 / self.cfg.length, self.domain.spacing,
            *self._args, self.rcfg.newton_tol, self.rcfg.max_iter, self.rcfg.damping, out, record,
        )
        bad = ~(worst <= self.rcfg.newton_tol)
        if np.any(bad):
            raise SolverError(
                f"implicit step failed on {int(bad.sum())} chain(s); worst residual {np.nanmax(worst):.3e}",
                residual=float(np.nanmax(worst)),
            )
        return out if record else None

    def drift(self, coeffs):
        """``F_n(x)`` coefficients: ``-mu_k <Psi(x), e_k>``."""
        return -self.mu * self.psi_coeffs(coeffs)

    def psi_coeffs(self, coeffs, n=None):
        grid = np.asarray(coeffs) @ self.S.T
        n = self.n if n is None else n
        return spectral.dst_forward(psi_eval(self.psi, grid), self.domain, n, fast=n > 32)


def initial_state(cfg: SamplerConfig) -> np.ndarray:
    return np.zeros(cfg.n_modes) if cfg.x0 is None else np.array(cfg.x0, dtype=float)


def step(psi: PsiSpec, state: ChainState, cfg: SamplerConfig,
         rcfg: ResolventConfig = ResolventConfig(), system: GalerkinSystem | None = None) -> ChainState:
    """One drift-implicit step; draws ``n`` normals from the chain's stream."""
    system = system or GalerkinSystem(psi, cfg, rcfg)
    Y = np.array(state.coeffs, dtype=float).reshape(1, -1)
    eta = state.rng.standard_normal((1, 1, cfg.n_modes))
    try:
        system.advance(Y, eta)
    except SolverError as err:
        err.step = state.step + 1
        raise
    return ChainState(Y[0].copy(), state.step + 1, state.rng)


def batch_means(series, n_batches: int = 64):
    """Mean and batch-means standard error along axis 0."""
    x = np.asarray(series, dtype=float)
    N = x.shape[0]
    if N == 0:
        raise ValueError("empty series")
    b = min(n_batches, N)
    size = N // b
    trimmed = x[N - size * b:]
    means = trimmed.reshape((b, size) + x.shape[1:]).mean(axis=1)
    se = means.std(axis=0, ddof=1) / np.sqrt(b) if b > 1 else np.full(x.shape[1:], np.inf)
    return x.mean(axis=0), se


def ensemble_stats(values: dict, n_batches: int = 64) -> EnsembleStats:
    names = list(values)
    arr = np.column_stack([np.asarray(values[k], dtype=float) for k in names])
    mean, se = batch_means(arr, n_batches)
    return EnsembleStats(names, arr.shape[0], mean, arr.var(axis=0, ddof=1) if arr.shape[0] > 1
                         else np.zeros(len(names)), se)


def sample_invariant(psi: PsiSpec, cfg: SamplerConfig, rcfg: ResolventConfig = ResolventConfig(),
                     block: int = 1 << 15) -> SampleSet:
    """Run one chain: discard ``burn_in`` steps, keep every ``thinning``-th state."""
    system = GalerkinSystem(psi, cfg, rcfg)
    rng = make_rng(cfg.seed, cfg.chain_index)
    Y = initial_state(cfg).reshape(1, -1)
    keep = []
    done = 0
    while done < cfg.n_steps:
        m = min(block, cfg.n_steps - done)
        states = system.advance(Y, rng.standard_normal((m, 1, cfg.n_modes)), record=True)[:, 0, :]
        idx = np.arange(done + 1, done + m + 1)
        sel = (idx > cfg.burn_in) & ((idx - cfg.burn_in) % cfg.thinning == 0)
        keep.append((idx[sel], states[sel]))
        done += m
    steps = np.concatenate([k[0] for k in keep])
    samples = np.concatenate([k[1] for k in keep], axis=0)
    obs = {f"x{k + 1}": samples[:, k] for k in range(cfg.n_modes)}
    obs |= {f"x{k + 1}^2": samples[:, k] ** 2 for k in range(cfg.n_modes)}
    meta = {"rng.algorithm": RNG_ALGORITHM, "rng.seed": cfg.seed, "rng.stream": cfg.chain_index}
    return SampleSet(samples, steps, cfg, psi, ensemble_stats(obs), meta)


def simulate_paths(psi: PsiSpec, cfg: SamplerConfig, x0, n_steps: int, stream_base: int = 1,
                   block_paths: int = 1024, record: bool = False, rcfg: ResolventConfig = ResolventConfig(),
                   dt: float | None = None, noise_scale=None, normals_fn=None):
    """Simulate an ensemble of paths from starting points ``x0`` (P, n).

    Paths are processed in blocks of ``block_paths``; block ``b`` draws from
    stream ``stream_base + b``. Returns the final states ``(P, n)`` and, with
    ``record``, the full trajectories ``(n_steps + 1, P, n)``.

    ``normals_fn(block_index, n_steps, n_paths)`` may supply the standard
    normals instead (used for common-random-number coupling).
    """
    system = GalerkinSystem(psi, cfg, rcfg)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    P = x0.shape[0]
    final = np.empty_like(x0)
    traj = np.empty((n_steps + 1, P, cfg.n_modes)) if record else None
    for b, start in enumerate(range(0, P, block_paths)):
        sl = slice(start, min(start + block_paths, P))
        Y = np.ascontiguousarray(x0[sl].copy())
        if normals_fn is None:
            eta = make_rng(cfg.seed, stream_base + b).standard_normal((n_steps, Y.shape[0], cfg.n_modes))
        else:
            eta = normals_fn(b, n_steps, Y.shape[0])
        out = system.advance(Y, eta, dt=dt, record=record, scale=noise_scale)
        final[sl] = Y
        if record:
            traj[0, sl] = x0[sl]
            traj[1:, sl] = out
    return (final, traj) if record else final


def moment_observables(samples, psi: PsiSpec, domain: DomainSpec, n_modes: int | None = None) -> dict:
    """Per-sample integrands of the moment identities.

    ``grad_psi_sq``   ``|Psi(x)|_{H1_0}^2 = |Delta Psi(x)|_H^2``
    ``grad_power_sq`` ``|grad(|x|^((r+1)/2) sign x)|_{L2}^2``
    ``l2r``           ``int |x|^(2r)``
    ``h_2r``          ``|x|_H^(2r)``
    ``phi``           ``Phi(x)``
    Gradients use all ``M`` sine modes of the nodal values.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = samples.shape[1] if n_modes is None else n_modes
    M = domain.grid_points
    grid = spectral.dst_inverse(samples, domain)
    mu_all = spectral.eigenvalues(M, domain.length)
    r = psi.r if psi.r is not None else 1.0
    wpsi = spectral.dst_forward(psi_eval(psi, grid), domain, M, fast=True)
    q = np.abs(grid) ** ((r + 1) / 2) * np.sign(grid)
    wq = spectral.dst_forward(q, domain, M, fast=True)
    return {
        "grad_psi_sq": np.sum(mu_all * wpsi**2, axis=1),
        "grad_power_sq": np.sum(mu_all * wq**2, axis=1),
        "l2r": lp_norm_power(grid, domain, 2 * r),
        "h_2r": spectral.norm(samples[:, :n], "Hminus1", domain.length) ** (2 * r),
        "phi": domain.spacing * np.sum(psi_antiderivative(psi, grid), axis=1),
    }


def lyapunov_integrand(samples, psi: PsiSpec, domain: DomainSpec):
    """``Phi(x) + |Delta Psi(x)|_H^2`` per coefficient row (all ``M`` modes)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    grid = spectral.dst_inverse(samples, domain)
    mu_all = spectral.eigenvalues(domain.grid_points, domain.length)
    wpsi = spectral.dst_forward(psi_eval(psi, grid), domain, domain.grid_points, fast=True)
    return domain.spacing * np.sum(psi_antiderivative(psi, grid), axis=1) + (wpsi**2) @ mu_all


def moment_report(samples, psi: PsiSpec, domain: DomainSpec, n_batches: int = 64, doublings: int = 3) -> dict:
    """Ergodic averages with batch-means errors plus a doubling stabilization check.

    For sizes ``N / 2^d, ..., N/2, N`` the mean at one size must move by at
    most 3 pooled standard errors when the sample is doubled.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("empty sample set")
    obs = moment_observables(samples, psi, domain)
    N = samples.shape[0]
    out = {}
    for name, vals in obs.items():
        mean, se = batch_means(vals, n_batches)
        checks = []
        sizes = [N >> d for d in range(doublings, -1, -1) if (N >> d) >= 2 * n_batches]
        for a, b in zip(sizes[:-1], sizes[1:]):
            ma, sa = batch_means(vals[:a], n_batches)
            mb, sb = batch_means(vals[:b], n_batches)
            pooled = float(np.hypot(sa, sb))
            change = float(abs(mb - ma))
            checks.append({"n": a, "2n": b, "change": change, "pooled_se": pooled,
                           "stable": bool(change <= 3 * pooled)})
        out[name] = {"mean": float(mean), "se": float(se), "doubling": checks,
                     "stable": all(c["stable"] for c in checks)}
    return out


def wilson_interval(hits: int, n: int, alpha: float = 0.05):
    lo, hi = proportion_confint(hits, n, alpha=alpha, method="wilson")
    # the closed form leaves rounding dust at the boundary counts
    if hits == 0:
        lo = 0.0
    if hits == n:
        hi = 1.0
    return float(lo), float(hi)


def ball_frequency(samples, center, radius: float, length: float = 1.0, alpha: float = 0.05) -> dict:
    """Fraction of samples with ``|x - center|_H <= radius`` and its Wilson interval."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    center = np.asarray(center, dtype=float)
    dist = spectral.norm(samples - center, "Hminus1", length)
    if radius == 0:
        hits = 0  # measure-zero event for continuous samples
    else:
        hits = int(np.count_nonzero(dist <= radius))
    n = samples.shape[0]
    lo, hi = wilson_interval(hits, n, alpha)
    return {"hits": hits, "n": n, "frequency": hits / n, "ci_low": lo, "ci_high": hi}


def ou_discrete_variance(alpha: float, mu, sigma, dt: float):
    """Stationary variance of ``y' = (y + sqrt(dt) sigma eta) / (1 + dt alpha mu)``.

    From ``v = a^2 (v + dt sigma^2)``, ``a = 1/(1 + dt alpha mu)``:
    ``v = sigma^2 / (alpha mu (2 + dt alpha mu))``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return sigma**2 / (alpha * mu * (2.0 + dt * alpha * mu))


def scalar_drift(psi: PsiSpec, length: float = 1.0, quad_points: int = 4097):
    """Drift of the one-mode system, ``b(c) = -mu_1 int Psi(c e_1) e_1``, by fine trapezoid."""
    xi = np.linspace(0.0, length, quad_points)
    e1 = np.sqrt(2.0 / length) * np.sin(np.pi * xi / length)
    w = np.full(quad_points, length / (quad_points - 1))
    w[[0, -1]] *= 0.5
    mu1 = (np.pi / length) ** 2

    def b(c):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return -mu1 * (psi_eval(psi, np.outer(c, e1)) * e1) @ w

    return b


def scalar_stationary_density(psi: PsiSpec, sigma: float, length: float = 1.0, half_width: float | None = None,
                              points: int = 20001):
    """Density ``p(c) ∝ exp(2 int_0^c b / sigma^2)`` of the one-mode diffusion.

    Returns ``(grid, pdf, cdf)`` on a symmetric grid, normalized by trapezoid
    quadrature.
    """
    b = scalar_drift(psi, length)
    if half_width is None:
        half_width = 1.0
        while True:
            c = np.linspace(0, half_width, 401)
            pot = cumulative_trapezoid(b(c), c, initial=0.0)
            if 2 * pot[-1] / sigma**2 < -60:
                break
            half_width *= 1.5
    c = np.linspace(-half_width, half_width, points)
    pot = cumulative_trapezoid(b(c), c, initial=0.0)
    logp = 2.0 * pot / sigma**2
    pdf = np.exp(logp - logp.max())
    cdf = cumulative_trapezoid(pdf, c, initial=0.0)
    Z = cdf[-1]
    return c, pdf / Z, cdf / Z


# -- persistence --------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_samples(path, sample_set: SampleSet, extra_header: dict | None = None):
    """CSV with ``#``-prefixed ``key=value`` header lines, then ``step,x1..xn`` rows."""
    cfg = sample_set.config
    header = {}
    header |= sample_set.psi.to_config()
    header |= cfg.to_config()
    header |= sample_set.metadata
    header |= extra_header or {}
    buf = io.StringIO()
    buf.write("# porouslab sample set\n")
    for k in sorted(header):
        buf.write(f"# {k}={header[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"x{k + 1}" for k in range(cfg.n_modes)])
    for s, row in zip(sample_set.steps, sample_set.samples):
        w.writerow([int(s)] + [_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_samples(path):
    """Inverse of :func:`write_samples`: returns ``(steps, samples, header)``."""
    header = {}
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            if "=" in ln:
                k, v = ln[1:].strip().split("=", 1)
                header[k.strip()] = v.strip()
        else:
            body.append(ln)
    reader = csv.reader(body)
    cols = next(reader)
    for row in reader:
        if row:
            rows.append(row)
    arr = np.array(rows, dtype=float).reshape(-1, len(cols))
    return arr[:, 0].astype(np.int64), arr[:, 1:], header


class InvariantMeasureSampler(BaseEstimator):
    """Estimator wrapper: ``fit`` runs the chain and stores ``samples_``.

    ``score_samples`` returns the moment observables of new fields and
    ``ball_frequency`` queries the fitted samples.
    """

    def __init__(self, psi=None, n_modes=8, grid_points=None, length=1.0, dt=1e-3, n_steps=100_000,
                 burn_in=None, thinning=1, seed=42, noise_convention="H", gamma=1.0, newton_tol=1e-12):
        self.psi = psi
        self.n_modes = n_modes
        self.grid_points = grid_points
        self.length = length
        self.dt = dt
        self.n_steps = n_steps
        self.burn_in = burn_in
        self.thinning = thinning
        self.seed = seed
        self.noise_convention = noise_convention
        self.gamma = gamma
        self.newton_tol = newton_tol

    def _config(self):
        return SamplerConfig(self.n_modes, self.grid_points, self.length, self.dt, self.n_steps, self.burn_in,
                             self.thinning, self.seed, self.noise_convention, self.gamma)

    def fit(self, X=None, y=None):
        self.psi_ = self.psi if self.psi is not None else PsiSpec("power_odd", m=3)
        self.config_ = self._config()
        if X is not None:
            X = np.asarray(X, dtype=float).reshape(-1)
            self.config_ = replace(self.config_, x0=tuple(X))
        result = sample_invariant(self.psi_, self.config_, ResolventConfig(newton_tol=self.newton_tol))
        self.samples_ = result.samples
        self.steps_ = result.steps
        self.stats_ = result.stats
        self.result_ = result
        return self

    def score_samples(self, X):
        check_is_fitted(self, "samples_")
        return moment_observables(X, self.psi_, self.config_.domain)

    def ball_frequency(self, center, radius):
        check_is_fitted(self, "samples_")
        return ball_frequency(self.samples_, center, radius, self.length)

    def energy(self, X):
        check_is_fitted(self, "samples_")
        grid = spectral.dst_inverse(np.atleast_2d(X), self.config_.domain)
        return np.array([phi_energy(self.psi_, g, self.config_.domain).value for g in grid])
