"""Cylindrical test functions and Monte Carlo checks of the Kolmogorov operator.

A cylinder function is ``phi(x) = f(t_1, ..., t_p)`` with ``t_i = <x, g_i>_H``.
Every catalog ``f`` is a product ``prod_i q(t_i)`` of bounded one-dimensional
factors with bounded first and second derivatives, so gradients and
Hessians follow from the product rule exactly.

``N0 phi(x) = 1/2 sum_k w_k D^2 phi(x)(b_k, b_k) + D phi(x)(Delta Psi(x))``
is evaluated with the drift term in the form
``-sum_i d_i f <g_i, Psi(x)>_{L2}`` and the trace term summed over the simulated
modes with the noise basis of the sampler's convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate

from porouslab import spectral
from porouslab._validation import ConventionMismatchError, DimensionError
from porouslab.nonlinearity import PsiSpec
from porouslab.sde import (
    GalerkinSystem,
    SamplerConfig,
    SampleSet,
    batch_means,
    make_rng,
    lyapunov_integrand,
    noise_amplitudes,
    ou_discrete_variance,
    simulate_paths,
)

__all__ = [
    "CylinderFunction",
    "ResidualReport",
    "BATTERY_VERSION",
    "standard_battery",
    "nonnegative_battery",
    "apply_N0",
    "drift_term",
    "trace_term",
    "invariance_residual",
    "calibrate_bias",
    "excessivity_check",
    "martingale_residual",
    "martingale_dt_sweep",
    "lyapunov_functional",
    "feynman_kac_paths",
    "scalar_ou_feynman_kac",
]

BATTERY_VERSION = "v1"
_KINDS = ("constant", "gaussian_bump", "damped_poly", "trig")


@dataclass(frozen=True, eq=False)
class CylinderFunction:
    """``phi(x) = f(<x, g_1>_H, ..., <x, g_p>_H)`` from the product catalog.

    Parameters
    ----------
    kind : {"constant", "gaussian_bump", "damped_poly", "trig"}
        ``gaussian_bump``: ``exp(-|t - c|^2 / w^2)``;
        ``damped_poly``: ``prod t_i^beta_i * exp(-|t|^2 / w^2)``;
        ``trig``: ``prod sin(omega_i t_i + phase_i)``.
    directions : array (p, n)
        L2 coefficients of ``g_i``.
    center, beta, omega, phase : per-coordinate parameters
    width : float
    name : str
    """

    kind: str
    directions: np.ndarray
    center: tuple = ()
    width: float = 1.0
    beta: tuple = ()
    omega: tuple = ()
    phase: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown cylinder function kind {self.kind!r}")
        g = np.atleast_2d(np.asarray(self.directions, dtype=float))
        object.__setattr__(self, "directions", g)
        p = g.shape[0]
        if p < 1:
            raise ValueError("need at least one direction")
        if not self.width > 0:
            raise ValueError("width must be positive")
        defaults = {"center": (0.0,) * p, "beta": (0,) * p, "omega": (1.0,) * p, "phase": (0.0,) * p}
        for key, val in defaults.items():
            cur = getattr(self, key)
            cur = val if len(cur) == 0 else tuple(cur)
            if len(cur) != p:
                raise ValueError(f"{key} needs {p} entries")
            object.__setattr__(self, key, cur)
        if any(int(b) != b or b < 0 for b in self.beta):
            raise ValueError("beta entries must be nonnegative integers")

    @classmethod
    def from_weights(cls, kind, weights, length=1.0, **kw):
        """Build from ``a`` with ``t_i = sum_k a_ik x_k``, i.e. ``g_i = mu * a_i``."""
        a = np.atleast_2d(np.asarray(weights, dtype=float))
        mu = spectral.eigenvalues(a.shape[1], length)
        return cls(kind, a * mu, **kw)

    @property
    def p(self) -> int:
        return self.directions.shape[0]

    @property
    def n(self) -> int:
        return self.directions.shape[1]

    def coordinates(self, x, length=1.0):
        """``t_i = <x, g_i>_H`` for coefficient rows ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n:
            raise DimensionError(f"state has {x.shape[1]} modes, directions have {self.n}")
        mu = spectral.eigenvalues(self.n, length)
        return (x / mu) @ self.directions.T

    def _factors(self, t):
        """One-dimensional factors ``q, q', q''`` of shape (N, p)."""
        if self.kind == "constant":
            one = np.ones_like(t)
            return one, np.zeros_like(t), np.zeros_like(t)
        if self.kind == "gaussian_bump":
            w2 = self.width**2
            d = t - np.asarray(self.center)
            q = np.exp(-d * d / w2)
            return q, -2 * d / w2 * q, (4 * d * d / w2**2 - 2 / w2) * q
        if self.kind == "damped_poly":
            w2 = self.width**2
            b = np.asarray(self.beta, dtype=float)
            e = np.exp(-t * t / w2)
            # powers with the convention 0^0 = 1 and vanishing negative-power terms
            pw = np.where(b >= 0, t**b, 0.0)
            pw1 = np.where(b >= 1, b * t ** np.maximum(b - 1, 0), 0.0)
            pw2 = np.where(b >= 2, b * (b - 1) * t ** np.maximum(b - 2, 0), 0.0)
            e1 = -2 * t / w2 * e
            e2 = (4 * t * t / w2**2 - 2 / w2) * e
            return pw * e, pw1 * e + pw * e1, pw2 * e + 2 * pw1 * e1 + pw * e2
        om = np.asarray(self.omega)
        arg = om * t + np.asarray(self.phase)
        s, c = np.sin(arg), np.cos(arg)
        return s, om * c, -om * om * s

    def f_derivatives(self, t):
        """Return ``f (N,), grad (N, p), hess (N, p, p)`` at coordinates ``t``."""
        t = np.atleast_2d(np.asarray(t, dtype=float))
        q, q1, q2 = self._factors(t)
        N, p = t.shape
        f = np.prod(q, axis=1)
        grad = np.empty((N, p))
        hess = np.empty((N, p, p))
        for i in range(p):
            others = np.prod(np.delete(q, i, axis=1), axis=1)
            grad[:, i] = q1[:, i] * others
            hess[:, i, i] = q2[:, i] * others
            for j in range(i + 1, p):
                rest = np.prod(np.delete(q, [i, j], axis=1), axis=1)
                hess[:, i, j] = hess[:, j, i] = q1[:, i] * q1[:, j] * rest
        return f, grad, hess

    def __call__(self, x, length=1.0):
        return self.f_derivatives(self.coordinates(x, length))[0]

    def gradient(self, x, length=1.0):
        """H-gradient coefficients: ``D phi(x) h = <grad, h>_H``."""
        _, grad, _ = self.f_derivatives(self.coordinates(x, length))
        return grad @ self.directions

    def directional(self, x, h, length=1.0):
        """``D phi(x) h`` and ``D^2 phi(x)(h, h)``."""
        _, grad, hess = self.f_derivatives(self.coordinates(x, length))
        th = self.coordinates(h, length)
        return np.einsum("ni,ni->n", grad, th), np.einsum("nij,ni,nj->n", hess, th, th)

    def describe(self) -> dict:
        return {"name": self.name, "kind": self.kind, "p": self.p, "center": list(self.center),
                "width": self.width, "beta": list(self.beta), "omega": list(self.omega),
                "phase": list(self.phase)}


def _dir(n, spec):
    """Weights ``a_k = 3 k w_k`` normalized to unit Euclidean ``w``; ``t`` is then O(1)."""
    w = np.zeros(n)
    for k, v in spec.items():
        if k <= n:
            w[k - 1] = v
    if not np.any(w):
        w[0] = 1.0
    w /= np.linalg.norm(w)
    return 3.0 * np.arange(1, n + 1) * w


def standard_battery(n: int, length: float = 1.0) -> list[CylinderFunction]:
    """Fixed battery of 14 test functions (version ``BATTERY_VERSION``).

    Directions cover a single low mode, the top mode, and mixed combinations.
    Centers and phases are shifted off zero so odd and even parts are probed.
    """
    low, two, three = _dir(n, {1: 1}), _dir(n, {2: 1}), _dir(n, {3: 1})
    high = _dir(n, {n: 1})
    mixed = _dir(n, {1: 1, 2: 1})
    alt = _dir(n, {k: (-1) ** k for k in range(1, n + 1)})
    odd = _dir(n, {k: 1 for k in range(1, n + 1, 2)})
    spread = _dir(n, {1: 0.5, 3: 1, 5: -0.7})
    specs = [
        ("const", "constant", [low], {}),
        ("gauss_e1", "gaussian_bump", [low], {}),
        ("gauss_e1_shift", "gaussian_bump", [low], {"center": (0.6,)}),
        ("gauss_e2_shift", "gaussian_bump", [two], {"center": (-0.4,)}),
        ("gauss_top", "gaussian_bump", [high], {"center": (0.3,)}),
        ("cos_mixed", "trig", [mixed], {"omega": (1.5,), "phase": (np.pi / 2,)}),
        ("sin_e1", "trig", [low], {"omega": (1.0,), "phase": (0.3,)}),
        ("poly2_e1", "damped_poly", [low], {"beta": (2,)}),
        ("gauss_e1e2", "gaussian_bump", [low, two], {"center": (0.3, -0.2)}),
        ("trig_mixed_alt", "trig", [mixed, alt], {"omega": (1.0, 0.8), "phase": (0.5, 1.2)}),
        ("poly11_e1e3", "damped_poly", [low, three], {"beta": (1, 1)}),
        ("gauss_e1e2e3", "gaussian_bump", [low, two, three], {"center": (0.2, 0.0, -0.3), "width": 1.5}),
        ("trig_e1_odd_top", "trig", [low, odd, high], {"omega": (1.0, 0.7, 1.3), "phase": (1.0, 0.4, 1.5)}),
        ("poly201_spread", "damped_poly", [low, spread, three], {"beta": (2, 0, 1), "width": 1.2}),
    ]
    return [CylinderFunction.from_weights(kind, np.array(dirs), length, name=name, **kw)
            for name, kind, dirs, kw in specs]


def nonnegative_battery(n: int, length: float = 1.0) -> list[CylinderFunction]:
    """Members of :func:`standard_battery` that are nonnegative everywhere."""
    out = []
    for phi in standard_battery(n, length):
        if phi.kind in ("constant", "gaussian_bump"):
            out.append(phi)
        elif phi.kind == "damped_poly" and all(b % 2 == 0 for b in phi.beta):
            out.append(phi)
    return out


def _system(psi, cfg) -> GalerkinSystem:
    return GalerkinSystem(psi, cfg)


def drift_term(phi: CylinderFunction, x, psi: PsiSpec, cfg: SamplerConfig, grad=None):
    """``D phi(x)(Delta Psi(x)) = -sum_i d_i f <g_i, Psi(x)>_{L2}``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if grad is None:
        _, grad, _ = phi.f_derivatives(phi.coordinates(x, cfg.length))
    psi_c = _system(psi, cfg).psi_coeffs(x)
    return -np.einsum("ni,ni->n", grad, psi_c @ phi.directions.T)


def _trace_weights(cfg: SamplerConfig):
    """Per-mode factor ``w_k <e_k-part>``: ``sum_k c_k g_ik g_jk`` is the trace term core."""
    mu = spectral.eigenvalues(cfg.n_modes, cfg.length)
    # <g_i, b_k>_H <g_j, b_k>_H w_k = g_ik g_jk sigma_k^2 / mu_k^2 in both conventions
    return noise_amplitudes(cfg) ** 2 / mu**2


def trace_term(phi: CylinderFunction, x, cfg: SamplerConfig, hess=None):
    """``1/2 sum_k w_k D^2 phi(x)(b_k, b_k)`` over the simulated modes."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if hess is None:
        _, _, hess = phi.f_derivatives(phi.coordinates(x, cfg.length))
    c = _trace_weights(cfg)
    A = np.einsum("ik,k,jk->ij", phi.directions, c, phi.directions)
    return 0.5 * np.einsum("nij,ij->n", hess, A)


def apply_N0(phi: CylinderFunction, x, psi: PsiSpec, cfg: SamplerConfig):
    """Kolmogorov operator on coefficient rows ``x`` (N, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if phi.n != cfg.n_modes or x.shape[1] != cfg.n_modes:
        raise DimensionError("directions and states must have n_modes coefficients")
    if phi.kind == "constant":
        return np.zeros(x.shape[0])
    _, grad, hess = phi.f_derivatives(phi.coordinates(x, cfg.length))
    return drift_term(phi, x, psi, cfg, grad) + trace_term(phi, x, cfg, hess)


@dataclass
class ResidualReport:
    """Per-test-function Monte Carlo estimates with a z-level verdict."""

    battery: str
    count: int
    z: float
    bias_allowance: float
    rows: list = field(default_factory=list)
    tail_contribution: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r["verdict"] == "pass" for r in self.rows)

    @property
    def estimate(self):
        return np.array([r["estimate"] for r in self.rows])

    @property
    def se(self):
        return np.array([r["se"] for r in self.rows])

    def failures(self):
        return [r["name"] for r in self.rows if r["verdict"] != "pass"]

    def as_dict(self) -> dict:
        return {"battery": self.battery, "count": self.count, "z": self.z, "bias_allowance": self.bias_allowance,
                "tail_contribution": self.tail_contribution, "verdict": "pass" if self.passed else "fail",
                "functions": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _sample_convention(samples):
    if isinstance(samples, SampleSet):
        return samples.config.noise_convention, samples.samples
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[1], dict):
        arr, header = samples
        conv = header.get("sde.noise_convention")
        return conv, np.asarray(arr, dtype=float)
    return None, np.asarray(samples, dtype=float)


def invariance_residual(samples, battery, psi: PsiSpec, cfg: SamplerConfig, z: float = 3.0,
                        bias_constant=0.0, n_batches: int = 64) -> ResidualReport:
    """Batch-means estimate of ``int N0 phi d nu`` for each battery member.

    ``samples`` is a :class:`SampleSet`, ``(array, header)`` from
    :func:`porouslab.sde.read_samples`, or a bare array (convention unchecked).
    A member passes when ``|estimate| <= z SE + C dt``; ``bias_constant`` is
    one ``C`` for all members or a mapping from member name to ``C``
    (as returned in ``calibrate_bias(...)["C_per_function"]``).
    """
    conv, X = _sample_convention(samples)
    if conv is not None and conv != cfg.noise_convention:
        raise ConventionMismatchError(
            f"samples were drawn with noise_convention={conv}, evaluator uses {cfg.noise_convention}"
        )
    per = bias_constant if isinstance(bias_constant, dict) else None
    rep = ResidualReport(BATTERY_VERSION, X.shape[0], z, None if per else bias_constant * cfg.dt)
    for phi in battery:
        allowance = (per.get(phi.name, 0.0) if per else bias_constant) * cfg.dt
        vals = apply_N0(phi, X, psi, cfg)
        mean, se = batch_means(vals, n_batches)
        mean, se = float(mean), float(se)
        ok = abs(mean) <= z * se + allowance
        rep.rows.append({"name": phi.name, "p": phi.p, "kind": phi.kind, "estimate": mean, "se": se,
                         "bias_allowance": allowance,
                         "z_score": abs(mean) / se if se > 0 else (0.0 if mean == 0 else np.inf),
                         "verdict": "pass" if ok else "fail"})
    return rep


def calibrate_bias(battery, cfg: SamplerConfig, alpha: float = 1.0, dt_cal: float | None = None,
                   draws: int = 1_000_000, seed: int = 2024) -> dict:
    """Bias constants from the linear surrogate's exact discrete stationary law.

    For ``Psi(s) = alpha s`` the drift-implicit chain is Gaussian with
    independent modes of variance ``sigma_k^2 / (alpha mu_k (2 + dt alpha mu_k))``,
    so ``int N0 phi d nu_dt`` is estimated from iid exact draws. The bias per
    unit step is ``C_phi = |estimate_phi| / dt_cal`` for each member and
    ``C = max_phi C_phi`` overall. ``dt_cal`` defaults to ``cfg.dt``.
    """
    dt_cal = cfg.dt if dt_cal is None else dt_cal
    lin = PsiSpec("linear", alpha=alpha)
    cal = SamplerConfig(n_modes=cfg.n_modes, grid_points=cfg.grid_points, length=cfg.length, dt=dt_cal,
                        n_steps=2, burn_in=0, noise_convention=cfg.noise_convention, gamma=cfg.gamma)
    mu = spectral.eigenvalues(cfg.n_modes, cfg.length)
    sd = np.sqrt(ou_discrete_variance(alpha, mu, noise_amplitudes(cal), dt_cal))
    X = make_rng(seed, 0).standard_normal((draws, cfg.n_modes)) * sd
    per = {}
    for phi in battery:
        vals = apply_N0(phi, X, lin, cal)
        per[phi.name] = {"estimate": float(vals.mean()), "se": float(vals.std(ddof=1) / np.sqrt(draws))}
    C_per = {k: abs(v["estimate"]) / dt_cal for k, v in per.items()}
    return {"C": float(max(C_per.values())), "C_per_function": C_per, "dt_cal": dt_cal, "alpha": alpha,
            "draws": draws, "per_function": per}


def excessivity_check(samples, battery, horizon: float, psi: PsiSpec, cfg: SamplerConfig,
                      lambda_nu: float = 0.0, restarts: int | None = None, stream_base: int = 1000,
                      z: float = 3.0) -> dict:
    """Compare ``int P_t phi d nu`` with ``e^(lambda t) int phi d nu``.

    Chains restart from (a subset of) the sampled states and run for
    ``horizon``; ``phi(X_t) - phi(x)`` is averaged pairwise so the SE is
    that of the difference.
    """
    _, X = _sample_convention(samples)
    nsteps = int(round(horizon / cfg.dt))
    if not np.isclose(nsteps * cfg.dt, horizon, rtol=1e-9, atol=1e-12):
        raise ValueError("horizon must be a multiple of dt")
    if restarts is not None and restarts < X.shape[0]:
        idx = np.linspace(0, X.shape[0] - 1, restarts).round().astype(int)
        X = X[idx]
    Xt = simulate_paths(psi, cfg, X, nsteps, stream_base=stream_base) if nsteps > 0 else X.copy()
    rows = []
    grow = np.exp(lambda_nu * horizon)
    for phi in battery:
        f0 = phi(X, cfg.length)
        if np.any(f0 < 0):
            raise ValueError(f"battery member {phi.name} is not nonnegative")
        ft = phi(Xt, cfg.length)
        lhs, rhs = float(ft.mean()), float(f0.mean())
        diff = ft - f0
        se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
        bound = grow * rhs
        ok = lhs <= bound + z * se
        if rhs > 0 and lhs - z * se > rhs:
            lam_min = float(np.log((lhs - z * se) / rhs) / horizon) if horizon > 0 else np.inf
        else:
            lam_min = 0.0
        rows.append({"name": phi.name, "lhs": lhs, "rhs": rhs, "bound": bound, "se": se,
                     "two_sided_equal": bool(abs(lhs - rhs) <= z * se),
                     "smallest_lambda": lam_min,
                     "informative": bool(bound - rhs <= z * se),
                     "verdict": "pass" if ok else "fail"})
    return {"horizon": horizon, "lambda_nu": lambda_nu, "count": int(X.shape[0]), "functions": rows,
            "smallest_lambda": max(r["smallest_lambda"] for r in rows),
            "verdict": "pass" if all(r["verdict"] == "pass" for r in rows) else "fail"}


def _path_normals(seed, stream_base, n_fine_steps, n_modes, block_paths):
    def normals(block, n_steps, n_paths, factor):
        rng = make_rng(seed, stream_base + block)
        fine = rng.standard_normal((n_fine_steps, n_paths, n_modes))
        # sum groups of `factor` fine increments: exact Brownian coupling across dt
        return fine.reshape(n_steps, factor, n_paths, n_modes).sum(axis=1) / np.sqrt(factor)

    return normals


def martingale_residual(x0, phi: CylinderFunction, t: float, n_paths: int, psi: PsiSpec, cfg: SamplerConfig,
                        z: float = 3.0, bias_constant: float = 0.0, stream_base: int = 5000,
                        block_paths: int = 1024, fine_dt: float | None = None) -> dict:
    """Estimate ``E[phi(X_t) - phi(x0) - int_0^t N0 phi(X_s) ds]``.

    The time integral is the trapezoid rule on the step grid. When
    ``fine_dt`` is given, normals are drawn on that finer grid and summed,
    so runs at different ``dt`` share one Brownian path per chain.
    """
    if n_paths < 100:
        raise ValueError("ensemble size must be at least 100")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    steps = int(round(t / cfg.dt))
    if not np.isclose(steps * cfg.dt, t, rtol=1e-9, atol=1e-14):
        raise ValueError("t must be a multiple of dt")
    if steps == 0:
        return {"t": t, "dt": cfg.dt, "estimate": 0.0, "se": 0.0, "n_paths": n_paths, "verdict": "pass"}
    normals_fn = None
    if fine_dt is not None:
        factor = int(round(cfg.dt / fine_dt))
        if not np.isclose(factor * fine_dt, cfg.dt):
            raise ValueError("dt must be a multiple of fine_dt")
        gen = _path_normals(cfg.seed, stream_base, steps * factor, cfg.n_modes, block_paths)
        normals_fn = lambda b, s, p: gen(b, s, p, factor)  # noqa: E731
    X0 = np.tile(x0, (n_paths, 1))
    resid = np.empty(n_paths)
    # blocks keep the trajectory array small
    for start in range(0, n_paths, block_paths):
        b = start // block_paths
        P = min(block_paths, n_paths - start)
        fn = None if normals_fn is None else (lambda _b, s, p, b=b: normals_fn(b, s, p))
        sub = replace(cfg, x0=None)
        _, traj = simulate_paths(psi, sub, X0[start:start + P], steps, stream_base=stream_base + b,
                                 block_paths=P, record=True, normals_fn=fn)
        flat = traj.reshape(-1, cfg.n_modes)
        gen_vals = apply_N0(phi, flat, psi, cfg).reshape(steps + 1, P)
        integral = cfg.dt * (gen_vals.sum(axis=0) - 0.5 * (gen_vals[0] + gen_vals[-1]))
        resid[start:start + P] = phi(traj[-1], cfg.length) - phi(traj[0], cfg.length) - integral
    est = float(resid.mean())
    se = float(resid.std(ddof=1) / np.sqrt(n_paths))
    ok = abs(est) <= z * se + bias_constant * cfg.dt
    return {"t": t, "dt": cfg.dt, "estimate": est, "se": se, "n_paths": n_paths,
            "bias_allowance": bias_constant * cfg.dt, "verdict": "pass" if ok else "fail",
            "_residuals": resid}


def martingale_dt_sweep(x0, phi, t, n_paths, psi, cfg: SamplerConfig, dts=(4e-3, 2e-3, 1e-3),
                        stream_base: int = 5000, z: float = 3.0, bias_constant: float = 0.0) -> dict:
    """Residuals over a dt sweep with common random numbers.

    With weak order one the systematic residual is ``a dt + o(dt)``, so
    successive differences ``D_j = r(dt_j) - r(dt_{j+1})`` halve together
    with dt; the reported slope is ``log(D_1/D_2) / log(dt_1/dt_2)``.
    Differences are taken path by path, cancelling the shared martingale noise.
    """
    dts = sorted(dts, reverse=True)
    fine = min(dts)
    runs = []
    for dt in dts:
        sub = replace(cfg, dt=dt, x0=None)
        runs.append(martingale_residual(x0, phi, t, n_paths, psi, sub, z=z, bias_constant=bias_constant,
                                        stream_base=stream_base, fine_dt=fine))
    diffs = []
    for a, b in zip(runs[:-1], runs[1:]):
        d = a["_residuals"] - b["_residuals"]
        diffs.append({"dt_pair": [a["dt"], b["dt"]], "difference": float(d.mean()),
                      "se": float(d.std(ddof=1) / np.sqrt(d.size))})
    slope = None
    if len(diffs) >= 2 and diffs[0]["difference"] * diffs[1]["difference"] > 0:
        slope = float(np.log(diffs[0]["difference"] / diffs[1]["difference"]) / np.log(dts[0] / dts[1]))
    for r in runs:
        r.pop("_residuals")
    return {"runs": runs, "differences": diffs, "slope": slope,
            "slope_ok": slope is not None and 0.7 <= slope <= 1.3}


def feynman_kac_paths(states, psi: PsiSpec, cfg: SamplerConfig, integrand, t_max: float, paths: int,
                      stream_base: int = 20_000, chunk_states: int = 16, noise_scale=None) -> np.ndarray:
    """Per-path values of ``int_0^T e^-t integrand(X_t^x) dt`` for each start ``x``.

    The time integral uses the trapezoid rule on the step grid. Returns an
    array of shape ``(len(states), paths)``; ``noise_scale`` is passed to
    :func:`porouslab.sde.simulate_paths` (0 switches the noise off).
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    steps = int(round(t_max / cfg.dt))
    weights = np.exp(-cfg.dt * np.arange(steps + 1)) * cfg.dt
    weights[[0, -1]] *= 0.5
    S = X.shape[0]
    per_path = np.empty((S, paths))
    for c0 in range(0, S, chunk_states):
        idx = np.arange(c0, min(c0 + chunk_states, S))
        starts = np.repeat(X[idx], paths, axis=0)
        _, traj = simulate_paths(psi, cfg, starts, steps, stream_base=stream_base + c0, block_paths=starts.shape[0],
                                 record=True, noise_scale=noise_scale)
        h = integrand(traj.reshape(-1, cfg.n_modes)).reshape(steps + 1, -1)
        per_path[idx] = (weights @ h).reshape(len(idx), paths)
    return per_path


def lyapunov_functional(samples, psi: PsiSpec, cfg: SamplerConfig, t_max: float = 6.0, paths: int = 64,
                        n_states: int = 200, stream_base: int = 20_000, n_boot: int = 2000,
                        alpha: float = 0.05, boot_seed: int = 7, chunk_states: int = 16) -> dict:
    """Feynman-Kac estimate of ``g(x) = E int_0^T e^-t (Phi + |Delta Psi|_H^2)(X_t^x) dt``.

    Reports ``min_x g(x) / |x|_{L2}^(r+1)`` over the chosen states with a
    percentile bootstrap interval (paths resampled within each state).
    """
    if t_max < 5:
        raise ValueError("t_max must be at least 5")
    psi.require_r_at_least(2.0)
    _, X = _sample_convention(samples)
    if n_states < X.shape[0]:
        X = X[np.linspace(0, X.shape[0] - 1, n_states).round().astype(int)]
    domain = cfg.domain
    S = X.shape[0]
    per_path = feynman_kac_paths(X, psi, cfg, lambda Z: lyapunov_integrand(Z, psi, domain), t_max, paths,
                                 stream_base, chunk_states)
    g = per_path.mean(axis=1)
    size = np.sqrt(np.sum(X**2, axis=1)) ** (psi.r + 1)
    keep = size > 0
    ratio = g[keep] / size[keep]
    rng = make_rng(boot_seed, 0)
    boot = np.empty(n_boot)
    for b in range(n_boot):
        pick = rng.integers(0, paths, size=(S, paths))
        gb = np.take_along_axis(per_path, pick, axis=1).mean(axis=1)
        boot[b] = np.min(gb[keep] / size[keep])
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    return {"n_states": int(S), "paths": paths, "t_max": t_max, "dt": cfg.dt,
            "min_ratio": float(ratio.min()), "ci_low": float(lo), "ci_high": float(hi),
            "excluded_zero_states": int((~keep).sum()),
            "g": g, "ratio": ratio,
            "verdict": "pass" if ratio.min() > 0 and lo > 0 else "fail"}


def scalar_ou_feynman_kac(x: float, a: float, sigma: float, weight: float = 1.0, t_max: float = np.inf):
    """``int_0^T e^-t weight E[X_t^2] dt`` for ``dX = -a X dt + sigma dW`` by quadrature."""
    def m2(t):
        return x * x * np.exp(-2 * a * t) + sigma**2 * (1 - np.exp(-2 * a * t)) / (2 * a)

    val, _ = integrate.quad(lambda t: np.exp(-t) * weight * m2(t), 0.0, t_max, epsabs=1e-13, epsrel=1e-12)
    return val
