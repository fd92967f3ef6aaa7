"""The monotone nonlinearity Psi, its antiderivative and the energy Phi."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from porouslab.spectral import DomainSpec

__all__ = [
    "PsiSpec",
    "EnergyValue",
    "H3Report",
    "psi_eval",
    "psi_prime",
    "psi_antiderivative",
    "psi_inverse",
    "phi_energy",
    "lp_norm_power",
    "h3_validate",
]

# integer codes shared with the compiled kernels in porouslab._kernels
KIND_CODES = {"power_odd": 0, "affine_power": 1, "linear": 2, "custom": 3}


@dataclass(frozen=True, eq=False)
class PsiSpec:
    """Nonlinearity ``Psi`` with the growth constants ``(r, kappa0, kappa1, C1)``.

    Kinds
    -----
    ``power_odd``    ``Psi(s) = s^m`` with ``m`` odd (degenerate at 0).
    ``affine_power`` ``Psi(s) = alpha s + s^m``.
    ``linear``       ``Psi(s) = alpha s``; test surrogate with closed-form
                     Galerkin dynamics, does not satisfy the growth bound.
    ``custom``       piecewise-linear interpolation of a nondecreasing table,
                     extended linearly beyond the end knots.

    Growth constants may be given explicitly; otherwise they are derived for
    the built-in kinds.
    """

    kind: str = "power_odd"
    m: int = 3
    alpha: float = 0.0
    table_x: tuple = ()
    table_y: tuple = ()
    r: float | None = None
    kappa0: float | None = None
    kappa1: float | None = None
    C1: float | None = None
    _tab: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown psi kind {self.kind!r}")
        if self.kind in ("power_odd", "affine_power"):
            if int(self.m) != self.m or self.m < 1 or self.m % 2 == 0:
                raise ValueError(f"m must be an odd positive integer, got {self.m}")
            object.__setattr__(self, "m", int(self.m))
        if self.kind in ("affine_power", "linear") and self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.kind == "linear" and not self.alpha > 0:
            raise ValueError("linear surrogate needs alpha > 0")
        if self.kind == "custom":
            xs = np.asarray(self.table_x, dtype=float)
            ys = np.asarray(self.table_y, dtype=float)
            if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
                raise ValueError("custom table needs matching x/y arrays with at least 2 knots")
            if np.any(np.diff(xs) <= 0):
                raise ValueError("custom table x values must be strictly increasing")
            if np.any(np.diff(ys) < 0):
                bad = int(np.argmax(np.diff(ys) < 0))
                raise ValueError(
                    f"custom table is not monotone: Psi decreases between "
                    f"s={xs[bad]} and s={xs[bad + 1]}"
                )
            slopes = np.diff(ys) / np.diff(xs)
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs))])
            self._tab.update(x=xs, y=ys, slope=slopes, cum=cum)
            self._tab["F0"] = float(self._custom_F(np.array(0.0)))
        defaults = self._default_constants()
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

    def _default_constants(self):
        if self.kind == "power_odd":
            return dict(r=float(self.m), kappa0=float(self.m), kappa1=float(self.m), C1=0.0)
        if self.kind == "affine_power":
            return dict(r=float(self.m), kappa0=float(self.m), kappa1=float(self.m), C1=float(self.alpha))
        return dict(r=None, kappa0=None, kappa1=None, C1=None)

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def has_growth_constants(self) -> bool:
        return None not in (self.r, self.kappa0, self.kappa1, self.C1)

    def require_r_at_least(self, bound: float = 2.0):
        if not self.has_growth_constants or self.r < bound:
            raise ValueError(f"this experiment needs growth exponent r >= {bound}; psi has r={self.r}")

    def kernel_args(self):
        """Flat arguments for the compiled kernels."""
        if self.kind == "custom":
            t = self._tab
            return (self.code, 0.0, 1, t["x"], t["y"], t["slope"], t["cum"], t["F0"])
        empty = np.zeros(1)
        return (self.code, float(self.alpha), int(self.m), empty, empty, empty, empty, 0.0)

    def to_config(self) -> dict:
        out = {"psi.kind": self.kind}
        if self.kind in ("power_odd", "affine_power"):
            out["psi.m"] = self.m
        if self.kind in ("affine_power", "linear"):
            out["psi.alpha"] = self.alpha
        if self.kind == "custom":
            out["psi.table"] = ";".join(f"{x!r}:{y!r}" for x, y in zip(self.table_x, self.table_y))
        return out

    # -- custom-table helpers -------------------------------------------------
    def _segment(self, s):
        t = self._tab
        idx = np.clip(np.searchsorted(t["x"], s, side="right") - 1, 0, t["x"].size - 2)
        return idx, s - t["x"][idx]

    def _custom_F(self, s):
        t = self._tab
        idx, d = self._segment(s)
        return t["cum"][idx] + t["y"][idx] * d + 0.5 * t["slope"][idx] * d * d


@dataclass(frozen=True)
class EnergyValue:
    value: float
    representable: bool
    lower_bound: float
    slack: float


@dataclass
class H3Report:
    passed: bool
    worst_lower_margin: float
    worst_upper_margin: float
    violating_s: float | None
    message: str = ""


def _ipow(s, k: int):
    """``s**k`` for integer ``k >= 0`` by repeated squaring (much faster than ``pow``)."""
    out = np.ones_like(s)
    base = s
    while k:
        if k & 1:
            out = out * base
        k >>= 1
        if k:
            base = base * base
    return out


def psi_eval(p: PsiSpec, s):
    s = np.asarray(s, dtype=float)
    if p.kind == "power_odd":
        return _ipow(s, p.m)
    if p.kind == "affine_power":
        return p.alpha * s + _ipow(s, p.m)
    if p.kind == "linear":
        return p.alpha * s
    idx, d = p._segment(s)
    return p._tab["y"][idx] + p._tab["slope"][idx] * d


def psi_prime(p: PsiSpec, s):
    s = np.asarray(s, dtype=float)
    if p.kind == "power_odd":
        return p.m * _ipow(s, p.m - 1)
    if p.kind == "affine_power":
        return p.alpha + p.m * _ipow(s, p.m - 1)
    if p.kind == "linear":
        return np.full_like(s, p.alpha)
    idx, _ = p._segment(s)
    return p._tab["slope"][idx]


def psi_antiderivative(p: PsiSpec, s):
    """``Psibar(s) = int_0^s Psi``."""
    s = np.asarray(s, dtype=float)
    if p.kind == "power_odd":
        return _ipow(s, p.m + 1) / (p.m + 1)
    if p.kind == "affine_power":
        return 0.5 * p.alpha * s * s + _ipow(s, p.m + 1) / (p.m + 1)
    if p.kind == "linear":
        return 0.5 * p.alpha * s * s
    return p._custom_F(s) - p._tab["F0"]


def psi_inverse(p: PsiSpec, w, tol=1e-15, max_iter=200):
    """Solve ``Psi(s) = w`` elementwise (Psi must be strictly increasing)."""
    w = np.asarray(w, dtype=float)
    if p.kind == "power_odd":
        return np.sign(w) * np.abs(w) ** (1.0 / p.m)
    if p.kind == "linear":
        return w / p.alpha
    # bracket, then bisection: robust for flat or kinked Psi
    lo = -np.ones_like(w)
    hi = np.ones_like(w)
    while np.any(psi_eval(p, lo) > w):
        lo = np.where(psi_eval(p, lo) > w, 2 * lo, lo)
    while np.any(psi_eval(p, hi) < w):
        hi = np.where(psi_eval(p, hi) < w, 2 * hi, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = psi_eval(p, mid) < w
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo, initial=0.0) <= tol * max(1.0, float(np.max(np.abs(hi), initial=0.0))):
            break
    return 0.5 * (lo + hi)


def lp_norm_power(x, domain: DomainSpec, q: float):
    """Trapezoid ``int |x|^q`` over the domain (zero boundary values)."""
    return domain.spacing * np.sum(np.abs(np.asarray(x, dtype=float)) ** q, axis=-1)


def phi_energy(p: PsiSpec, x, domain: DomainSpec) -> EnergyValue:
    """``Phi(x) = int Psibar(x(xi)) dxi`` by the trapezoid rule on the grid."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != domain.grid_points:
        raise ValueError(f"grid field of size {x.shape[-1]} on a domain with {domain.grid_points} nodes")
    representable = bool(np.all(np.isfinite(x)))
    value = float(domain.spacing * np.sum(psi_antiderivative(p, x)))
    if p.has_growth_constants:
        lower = p.kappa0 / (p.r * (p.r + 1)) * float(lp_norm_power(x, domain, p.r + 1))
    else:
        lower = 0.0
    return EnergyValue(value, representable, lower, value - lower)


def h3_validate(p: PsiSpec, sample_range=(-10.0, 10.0), samples: int = 10_000, rtol=1e-12) -> H3Report:
    """Check ``kappa0 |s|^(r-1) <= Psi'(s) <= kappa1 |s|^(r-1) + C1`` on a grid."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    if not p.has_growth_constants:
        return H3Report(False, np.nan, np.nan, None, f"{p.kind} has no growth constants")
    s = np.linspace(sample_range[0], sample_range[1], int(samples))
    d = psi_prime(p, s)
    a = np.abs(s) ** (p.r - 1)
    lower = d - p.kappa0 * a
    upper = p.kappa1 * a + p.C1 - d
    slack = rtol * (np.abs(d) + p.kappa1 * a + p.C1 + 1.0)
    bad = (lower < -slack) | (upper < -slack)
    worst_lo, worst_hi = float(lower.min()), float(upper.min())
    if np.any(bad):
        i = int(np.argmax(bad))
        which = "lower" if lower[i] < -slack[i] else "upper"
        return H3Report(False, worst_lo, worst_hi, float(s[i]), f"{which} bound violated at s={s[i]:.6g}")
    return H3Report(True, worst_lo, worst_hi, None, "ok")
