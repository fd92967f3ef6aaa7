"""The operator F = Delta Psi, its resolvent, Yosida approximation and Moreau envelope.

Two discretizations of ``F`` appear:

``apply_F``
    spectral: ``Delta`` acts diagonally on the sine coefficients of
    ``Psi(x)``. With all ``M`` modes it is exactly dissipative in the
    spectral H-norm, which is what the Galerkin sampler uses.
``apply_F_stencil``
    the 3-point Laplacian applied to the nodal values of ``Psi(x)``. The
    resolvent is solved for this operator (tridiagonal Newton systems), and
    all Yosida-type identities are checked in the matching discrete norm
    ``|u|_{H,h}^2 = h u^T (-Delta_h)^{-1} u`` in which it is exactly
    dissipative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from porouslab import spectral
from porouslab._kernels import thomas
from porouslab._validation import SolverError, as_field_array, check_positive
from porouslab.nonlinearity import PsiSpec, phi_energy, psi_eval, psi_inverse, psi_prime
from porouslab.spectral import DomainSpec

__all__ = [
    "ResolventConfig",
    "YosidaResult",
    "BatteryReport",
    "apply_F",
    "apply_F_stencil",
    "laplacian_stencil",
    "h1_stencil_norm",
    "resolvent",
    "yosida",
    "moreau_envelope",
    "moreau_gradient_check",
    "random_smooth_field",
    "property_battery",
    "moreau_battery",
    "YosidaRegularizer",
]


@dataclass(frozen=True)
class ResolventConfig:
    newton_tol: float = 1e-12
    max_iter: int = 50
    damping: float = 0.5

    def __post_init__(self):
        check_positive(self.newton_tol, "newton_tol")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")


@dataclass
class YosidaResult:
    J: np.ndarray
    F_eps: np.ndarray
    iterations: int
    residual: float
    method: str = "newton"


def laplacian_stencil(w, domain: DomainSpec):
    """3-point Dirichlet Laplacian on nodal values (last axis)."""
    w = np.asarray(w, dtype=float)
    pad = np.zeros(w.shape[:-1] + (w.shape[-1] + 2,))
    pad[..., 1:-1] = w
    return (pad[..., 2:] - 2.0 * pad[..., 1:-1] + pad[..., :-2]) / domain.spacing**2


def h1_stencil_norm(w, domain: DomainSpec):
    """``sqrt(h sum |(w_{j+1} - w_j)/h|^2)`` with zero boundary values."""
    w = np.asarray(w, dtype=float)
    pad = np.zeros(w.shape[:-1] + (w.shape[-1] + 2,))
    pad[..., 1:-1] = w
    d = np.diff(pad, axis=-1) / domain.spacing
    return np.sqrt(domain.spacing * np.sum(d * d, axis=-1))


def _solve_neg_laplacian(rhs, domain: DomainSpec):
    M = domain.grid_points
    off = np.full(M, -1.0 / domain.spacing**2)
    diag = np.full(M, 2.0 / domain.spacing**2)
    return thomas(off, diag, off, np.ascontiguousarray(rhs, dtype=float))


def apply_F(p: PsiSpec, x, domain: DomainSpec, n: int | None = None):
    """Spectral ``Delta(Psi(x))``: sine coefficients of ``Psi(x)`` times ``-mu_k``."""
    x = as_field_array(x, domain.grid_points, "grid field")
    n = domain.grid_points if n is None else n
    w = spectral.dst_forward(psi_eval(p, x), domain, n, fast=n == domain.grid_points)
    return -spectral.eigenvalues(n, domain.length) * w


def apply_F_stencil(p: PsiSpec, x, domain: DomainSpec):
    """``Delta_h Psi(x)`` on the grid."""
    return laplacian_stencil(psi_eval(p, x), domain)


def _residual_norm(p, y, x, eps, domain):
    # |y - eps Delta_h Psi(y) - x|_{H,h} = |(-Delta_h)^{-1}(y - x) + eps Psi(y)|_{H1,h};
    # the right side avoids forming eps/h^2-sized differences
    R = _solve_neg_laplacian(y - x, domain) + eps * psi_eval(p, y)
    return float(h1_stencil_norm(R, domain))


def _newton_y(p, x, eps, domain, cfg):
    h2 = domain.spacing**2
    y = x.copy()
    res = _residual_norm(p, y, x, eps, domain)
    scale = max(1.0, float(spectral.grid_h_norm(x, domain)))
    it = 0
    while res > cfg.newton_tol * scale and it < cfg.max_iter:
        d = psi_prime(p, y)
        G = y - eps * laplacian_stencil(psi_eval(p, y), domain) - x
        lower = np.empty_like(y)
        upper = np.empty_like(y)
        lower[1:] = -eps * d[:-1] / h2
        upper[:-1] = -eps * d[1:] / h2
        lower[0] = upper[-1] = 0.0
        step = thomas(lower, 1.0 + 2.0 * eps * d / h2, upper, -G)
        t = 1.0
        while True:
            trial = y + t * step
            res_t = _residual_norm(p, trial, x, eps, domain)
            if res_t < res or t < 1e-12:
                break
            t *= cfg.damping
        it += 1
        if not res_t < res:
            break
        y, res = trial, res_t
    return y, it, res, scale


def _newton_w(p, x, eps, domain, cfg):
    """Fallback: solve ``Psi^{-1}(w) - eps Delta_h w = x`` for ``w = Psi(y)``."""
    h2 = domain.spacing**2
    w = psi_eval(p, x)
    y = psi_inverse(p, w)
    res = _residual_norm(p, y, x, eps, domain)
    scale = max(1.0, float(spectral.grid_h_norm(x, domain)))
    it = 0
    while res > cfg.newton_tol * scale and it < 4 * cfg.max_iter:
        G = y - eps * laplacian_stencil(w, domain) - x
        inv_d = 1.0 / np.maximum(psi_prime(p, y), 1e-300)
        off = np.full_like(w, -eps / h2)
        step = thomas(off, np.minimum(inv_d, 1e300) + 2.0 * eps / h2, off, -G)
        t = 1.0
        while True:
            w_t = w + t * step
            y_t = psi_inverse(p, w_t)
            res_t = _residual_norm(p, y_t, x, eps, domain)
            if res_t < res or t < 1e-12:
                break
            t *= cfg.damping
        it += 1
        if not res_t < res:
            break
        w, y, res = w_t, y_t, res_t
    return y, it, res, scale


def resolvent(p: PsiSpec, x, eps: float, domain: DomainSpec, cfg: ResolventConfig = ResolventConfig(),
              method: str = "auto") -> YosidaResult:
    """Solve ``y - eps Delta_h Psi(y) = x`` for ``y = J_eps x``.

    ``method`` is ``"newton"`` (damped Newton in ``y``), ``"substitution"``
    (Newton in ``w = Psi(y)``) or ``"auto"`` (the first, falling back to the
    second when it stalls). The residual is measured in the discrete H-norm
    relative to ``max(1, |x|_{H,h})``.
    """
    check_positive(eps, "eps")
    x = np.array(as_field_array(x, domain.grid_points, "grid field"), dtype=float)
    if method not in ("auto", "newton", "substitution"):
        raise ValueError(f"unknown resolvent method {method!r}")
    used = "newton" if method != "substitution" else "substitution"
    if used == "newton":
        y, it, res, scale = _newton_y(p, x, eps, domain, cfg)
        if res > cfg.newton_tol * scale and method == "auto":
            used = "substitution"
    if used == "substitution":
        y, it, res, scale = _newton_w(p, x, eps, domain, cfg)
    if res > cfg.newton_tol * scale:
        raise SolverError(
            f"resolvent did not converge (eps={eps:g}, residual {res:.3e} after {it} iterations)",
            residual=res,
        )
    return YosidaResult(J=y, F_eps=(y - x) / eps, iterations=it, residual=res, method=used)


def yosida(p: PsiSpec, x, eps: float, domain: DomainSpec, cfg: ResolventConfig = ResolventConfig(),
           method: str = "auto") -> YosidaResult:
    """``F_eps x = (J_eps x - x) / eps``; same result object as :func:`resolvent`."""
    return resolvent(p, x, eps, domain, cfg, method)


def moreau_envelope(p: PsiSpec, x, eps: float, domain: DomainSpec,
                    cfg: ResolventConfig = ResolventConfig()) -> float:
    """``Phi_eps(x) = |x - J x|^2 / (2 eps) + Phi(J x)`` in the discrete H-norm.

    ``J_eps x`` is exactly the proximal point of ``eps Phi`` because the
    H-gradient of ``Phi`` is ``-Delta_h Psi``.
    """
    r = resolvent(p, x, eps, domain, cfg)
    d = float(spectral.grid_h_norm(np.asarray(x) - r.J, domain))
    return d * d / (2.0 * eps) + phi_energy(p, r.J, domain).value


def moreau_gradient_check(p: PsiSpec, x, direction, eps: float, domain: DomainSpec,
                          cfg: ResolventConfig = ResolventConfig(), step: float = 1e-5) -> dict:
    """Central difference of ``Phi_eps`` along ``direction`` against ``<+-F_eps x, direction>_H``.

    Returns the finite-difference slope, both signed candidates and which
    sign matches.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(direction, dtype=float)
    v = v / spectral.grid_h_norm(v, domain)
    fd = (moreau_envelope(p, x + step * v, eps, domain, cfg)
          - moreau_envelope(p, x - step * v, eps, domain, cfg)) / (2.0 * step)
    F_eps = yosida(p, x, eps, domain, cfg).F_eps
    plus = float(spectral.grid_h_inner(F_eps, v, domain))
    denom = max(abs(fd), 1e-300)
    err_minus = abs(fd + plus) / denom
    err_plus = abs(fd - plus) / denom
    return {
        "fd_slope": fd,
        "plus_F_eps": plus,
        "minus_F_eps": -plus,
        "rel_err_minus": err_minus,
        "rel_err_plus": err_plus,
        "sign": "-" if err_minus < err_plus else "+",
        "rel_err": min(err_minus, err_plus),
    }


def random_smooth_field(rng, domain: DomainSpec, n: int = 8, scale: float = 1.0, decay: float = 1.0):
    """Grid samples of ``sum_k c_k e_k`` with ``c_k ~ N(0, (scale / k^decay)^2)``."""
    k = np.arange(1, n + 1)
    c = rng.standard_normal(n) * scale / k**decay
    return spectral.dst_inverse(c, domain)


@dataclass
class BatteryReport:
    passed: bool
    worst: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    trials: int = 0
    moreau_sign: str | None = None

    def as_dict(self):
        return {"passed": self.passed, "trials": self.trials, "worst_margins": self.worst,
                "failures": self.failures, "moreau_gradient_sign": self.moreau_sign}


def property_battery(p: PsiSpec, seed: int = 42, trials: int = 100, domain: DomainSpec | None = None,
                     n: int = 8, cfg: ResolventConfig = ResolventConfig(),
                     eps_pairs=(1e-3, 1e-1, 1.0), eps_sweep=(1e-1, 1e-2, 1e-3, 1e-4),
                     tol: float = 1e-9, dissipativity_tol: float = 1e-10) -> BatteryReport:
    """Seeded check of dissipativity, resolvent contraction and the Yosida properties.

    Margins are reported as ``bound - value`` (nonnegative when the property
    holds). The inner-product property is checked in its correct form
    ``<F_eps x, F x>_H >= |F_eps x|_H^2``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    domain = domain or DomainSpec(1.0, 257)
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    failures: list[str] = []

    def record(name, margin, threshold):
        worst[name] = min(worst.get(name, np.inf), float(margin))
        if margin < -threshold and name not in failures:
            failures.append(name)

    hn = lambda u: float(spectral.grid_h_norm(u, domain))  # noqa: E731
    hi = lambda u, v: float(spectral.grid_h_inner(u, v, domain))  # noqa: E731
    check_tol = 1e-10
    for _ in range(trials):
        x = random_smooth_field(rng, domain, n)
        y = random_smooth_field(rng, domain, n)
        d = x - y
        # spectral F with all modes, spectral H-norm
        dF = apply_F(p, x, domain) - apply_F(p, y, domain)
        dk = spectral.dst_forward(d, domain, domain.grid_points, fast=True)
        record("dissipativity_spectral", -spectral.inner(dF, dk, "Hminus1", domain.length), dissipativity_tol)
        Fx_h, Fy_h = apply_F_stencil(p, x, domain), apply_F_stencil(p, y, domain)
        record("dissipativity_stencil", -hi(Fx_h - Fy_h, d), dissipativity_tol)
        for eps in eps_pairs:
            rx = resolvent(p, x, eps, domain, cfg)
            ry = resolvent(p, y, eps, domain, cfg)
            record("resolvent_residual", check_tol - max(rx.residual, ry.residual), 0.0)
            record("resolvent_nonexpansive", hn(d) - hn(rx.J - ry.J), tol)
            record("yosida_lipschitz", hn(d) / eps - hn(rx.F_eps - ry.F_eps), tol)
        norms, dists = [], []
        for eps in eps_sweep:
            r = yosida(p, x, eps, domain, cfg)
            record("resolvent_residual", check_tol - r.residual, 0.0)
            nF, nFe = hn(Fx_h), hn(r.F_eps)
            record("yosida_bounded_by_F", nF - nFe, tol)
            record("yosida_inner_product", hi(r.F_eps, Fx_h) - nFe**2, tol)
            norms.append(nFe)
            dists.append(hn(r.F_eps - Fx_h))
        record("yosida_norm_increasing", min(np.diff(norms)), tol)
        record("yosida_converges_monotone", min(-np.diff(dists)), tol)
    return BatteryReport(passed=not failures, worst=worst, failures=failures, trials=trials)


def moreau_battery(p: PsiSpec, seed: int = 7, fields: int = 20, domain: DomainSpec | None = None, n: int = 8,
                   eps: float = 1e-2, eps_sweep=(1e-1, 1e-2, 1e-3, 1e-4), cfg: ResolventConfig = ResolventConfig(),
                   rtol: float = 1e-5) -> dict:
    """Finite-difference gradient of ``Phi_eps`` on random fields and directions, plus the
    chain ``0 <= Phi_eps1 <= Phi_eps2 <= Phi`` for ``eps1 >= eps2``.

    The sign that matches (``-`` means ``grad_H Phi_eps = -F_eps``) is recorded,
    not assumed.
    """
    if fields < 1:
        raise ValueError("fields must be at least 1")
    domain = domain or DomainSpec(1.0, 257)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(fields):
        x = random_smooth_field(rng, domain, n)
        v = random_smooth_field(rng, domain, n)
        chk = moreau_gradient_check(p, x, v, eps, domain, cfg)
        env = [moreau_envelope(p, x, e, domain, cfg) for e in eps_sweep]
        phi = phi_energy(p, x, domain).value
        chain = env[0] >= 0 and all(b >= a - 1e-12 * max(1.0, abs(b)) for a, b in zip(env[:-1], env[1:])) \
            and env[-1] <= phi + 1e-12 * max(1.0, phi)
        rows.append({"field": i, "fd_slope": chk["fd_slope"], "sign": chk["sign"], "rel_err": chk["rel_err"],
                     "envelopes": env, "phi": phi, "chain_ok": bool(chain)})
    signs = sorted({r["sign"] for r in rows})
    worst = max(r["rel_err"] for r in rows)
    ok = len(signs) == 1 and worst <= rtol and all(r["chain_ok"] for r in rows)
    return {"passed": bool(ok), "sign": signs[0] if len(signs) == 1 else "mixed", "worst_rel_err": worst,
            "chain_ok": all(r["chain_ok"] for r in rows), "eps": eps, "rows": rows}


class YosidaRegularizer(TransformerMixin, BaseEstimator):
    """Resolvent / Yosida approximation of ``Delta Psi`` as a sklearn transformer.

    ``transform`` maps each row (a grid field) to ``J_eps x``; ``yosida``
    gives ``F_eps x`` and ``envelope`` the Moreau envelope.
    """

    def __init__(self, psi=None, epsilon=1e-2, length=1.0, newton_tol=1e-12, max_iter=50,
                 damping=0.5, method="auto"):
        self.psi = psi
        self.epsilon = epsilon
        self.length = length
        self.newton_tol = newton_tol
        self.max_iter = max_iter
        self.damping = damping
        self.method = method

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        check_positive(self.epsilon, "epsilon")
        self.psi_ = self.psi if self.psi is not None else PsiSpec("power_odd", m=3)
        self.domain_ = DomainSpec(self.length, X.shape[1])
        self.config_ = ResolventConfig(self.newton_tol, self.max_iter, self.damping)
        self.n_features_in_ = X.shape[1]
        return self

    def _rows(self, X, attr):
        check_is_fitted(self, "domain_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = [getattr(resolvent(self.psi_, x, self.epsilon, self.domain_, self.config_, self.method), attr)
               for x in X]
        return np.asarray(out)

    def transform(self, X):
        return self._rows(X, "J")

    def yosida(self, X):
        return self._rows(X, "F_eps")

    def envelope(self, X):
        check_is_fitted(self, "domain_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([moreau_envelope(self.psi_, x, self.epsilon, self.domain_, self.config_) for x in X])
