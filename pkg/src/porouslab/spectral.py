"""Dirichlet-Laplacian spectral core on the interval (0, L).

Fields live in two representations:

* grid values at the ``M`` interior nodes ``xi_j = j L / (M + 1)``;
* coefficients against the L2-normalized sine basis
  ``e_k(xi) = sqrt(2/L) sin(k pi xi / L)``.

With quadrature weight ``h = L / (M + 1)`` the sampled basis is exactly
orthonormal, so the transform pair below is an exact DST-I.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from porouslab._validation import DimensionError, as_field_array

__all__ = [
    "DomainSpec",
    "CovarianceSpec",
    "SpectralProjector",
    "dst_forward",
    "dst_inverse",
    "eigenvalues",
    "stencil_eigenvalues",
    "basis_matrix",
    "norm",
    "inner",
    "grid_h_inner",
    "grid_h_norm",
    "covariance_sqrt_apply",
    "project",
    "NORMS",
]

NORMS = ("L2", "H10", "Hminus1")


@dataclass(frozen=True)
class DomainSpec:
    """Interval ``(0, length)`` sampled at ``grid_points`` interior nodes."""

    length: float = 1.0
    grid_points: int = 64

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"domain length must be positive, got {self.length}")
        if int(self.grid_points) != self.grid_points or self.grid_points < 1:
            raise ValueError(f"grid_points must be a positive integer, got {self.grid_points}")
        object.__setattr__(self, "grid_points", int(self.grid_points))

    @property
    def spacing(self) -> float:
        return self.length / (self.grid_points + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.spacing * np.arange(1, self.grid_points + 1)


@dataclass(frozen=True)
class CovarianceSpec:
    """Noise covariance ``C = (-Delta)^(-gamma)``."""

    gamma: float = 1.0
    length: float = 1.0

    def __post_init__(self):
        if not (0.5 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (1/2, 1], got {self.gamma}")

    def eigenvalues(self, n: int) -> np.ndarray:
        """``lambda_k = mu_k^(-gamma)`` for ``k = 1..n``."""
        return eigenvalues(n, self.length) ** (-self.gamma)

    def sup_weights(self, n: int) -> np.ndarray:
        # sup |e_k|^2 over the domain for the L2-normalized sine
        return np.full(n, 2.0 / self.length)

    def partial_K(self, n: int) -> float:
        return float(np.sum(self.sup_weights(n) * self.eigenvalues(n)))

    def K_tail_bound(self, n: int) -> float:
        """Upper bound on ``sum_{k>n} alpha_k lambda_k`` (integral test)."""
        g = self.gamma
        c = (2.0 / self.length) * (self.length / np.pi) ** (2 * g)
        return float(c * n ** (1 - 2 * g) / (2 * g - 1))

    def K(self, n_terms: int = 200_000) -> float:
        """``K = sum_k alpha_k lambda_k``: partial sum plus midpoint tail estimate."""
        g = self.gamma
        c = (2.0 / self.length) * (self.length / np.pi) ** (2 * g)
        tail = c * (n_terms + 0.5) ** (1 - 2 * g) / (2 * g - 1)
        return self.partial_K(n_terms) + float(tail)


def eigenvalues(n: int, length: float = 1.0) -> np.ndarray:
    """``mu_k = (k pi / L)^2``, eigenvalues of ``-Delta``."""
    k = np.arange(1, n + 1, dtype=float)
    return (k * np.pi / length) ** 2


def stencil_eigenvalues(domain: DomainSpec) -> np.ndarray:
    """Eigenvalues of the 3-point Dirichlet ``-Delta_h``; same sine eigenvectors."""
    h = domain.spacing
    k = np.arange(1, domain.grid_points + 1, dtype=float)
    return (4.0 / h**2) * np.sin(k * np.pi * h / (2.0 * domain.length)) ** 2


@lru_cache(maxsize=64)
def basis_matrix(domain: DomainSpec, n: int) -> np.ndarray:
    """``S[j, k-1] = e_k(xi_j)``, shape ``(M, n)``. Cached, read-only."""
    j = np.arange(1, domain.grid_points + 1)
    k = np.arange(1, n + 1)
    # integer products keep the phase exact before scaling
    S = np.sqrt(2.0 / domain.length) * np.sin(np.pi * np.outer(j, k) / (domain.grid_points + 1))
    S.flags.writeable = False
    return S


def dst_forward(g, domain: DomainSpec, n: int, fast: bool = False) -> np.ndarray:
    """Grid values -> first ``n`` sine coefficients.

    Works on the last axis, so a stack of fields of shape ``(..., M)`` maps
    to ``(..., n)``.
    """
    g = as_field_array(g, domain.grid_points, "grid field")
    if n > domain.grid_points:
        raise DimensionError(f"requested {n} modes from a grid of {domain.grid_points} nodes")
    h = domain.spacing
    if fast:
        # scipy's unnormalized DST-I carries a factor 2
        c = scipy.fft.dst(g, type=1, axis=-1)[..., :n]
        return c * (h * np.sqrt(2.0 / domain.length) / 2.0)
    return h * (g @ basis_matrix(domain, n))


def dst_inverse(x, domain: DomainSpec, fast: bool = False) -> np.ndarray:
    """Sine coefficients ``(..., n)`` -> grid values ``(..., M)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if fast and n <= domain.grid_points:
        pad = np.zeros(x.shape[:-1] + (domain.grid_points,))
        pad[..., :n] = x
        # DST-I is its own inverse up to 2(M+1)
        return scipy.fft.dst(pad, type=1, axis=-1) * (np.sqrt(2.0 / domain.length) / 2.0)
    return x @ basis_matrix(domain, n).T


def _weights(which: str, n: int, length: float) -> np.ndarray:
    if which == "L2":
        return np.ones(n)
    mu = eigenvalues(n, length)
    if which == "H10":
        return mu
    if which == "Hminus1":
        return 1.0 / mu
    raise ValueError(f"unknown norm {which!r}; expected one of {NORMS}")


def inner(x, y, which: str = "Hminus1", length: float = 1.0):
    """Inner product of coefficient vectors (last axis)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = _weights(which, x.shape[-1], length)
    return np.sum(x * y * w, axis=-1)


def norm(x, which: str = "Hminus1", length: float = 1.0):
    return np.sqrt(inner(x, x, which, length))


def grid_h_inner(u, v, domain: DomainSpec):
    """Discrete H-inner product ``h u^T (-Delta_h)^{-1} v`` on grid fields.

    This is the inner product in which the stencil operator ``Delta_h Psi``
    is exactly dissipative.
    """
    uk = dst_forward(u, domain, domain.grid_points, fast=True)
    vk = dst_forward(v, domain, domain.grid_points, fast=True)
    return np.sum(uk * vk / stencil_eigenvalues(domain), axis=-1)


def grid_h_norm(u, domain: DomainSpec):
    return np.sqrt(np.maximum(grid_h_inner(u, u, domain), 0.0))


def covariance_sqrt_apply(x, cov: CovarianceSpec) -> np.ndarray:
    """Multiply coefficient ``k`` by ``sqrt(lambda_k)``."""
    x = np.asarray(x, dtype=float)
    return x * np.sqrt(cov.eigenvalues(x.shape[-1]))


def project(x, n: int) -> np.ndarray:
    """``P_n``: keep the first ``n`` coefficients, zero the rest."""
    out = np.array(x, dtype=float, copy=True)
    out[..., n:] = 0.0
    return out


class SpectralProjector(TransformerMixin, BaseEstimator):
    """Grid samples <-> truncated sine coefficients as a sklearn transformer.

    Parameters
    ----------
    n_modes : int
        Number of retained modes ``n``.
    length : float
        Domain length ``L``.
    fast : bool
        Use the FFT-based DST-I instead of the explicit sum.
    """

    def __init__(self, n_modes=8, length=1.0, fast=False):
        self.n_modes = n_modes
        self.length = length
        self.fast = fast

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.domain_ = DomainSpec(self.length, X.shape[1])
        if self.n_modes > self.domain_.grid_points:
            raise DimensionError(f"n_modes={self.n_modes} exceeds grid size {X.shape[1]}")
        self.eigenvalues_ = eigenvalues(self.n_modes, self.length)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "domain_")
        return dst_forward(X, self.domain_, self.n_modes, fast=self.fast)

    def inverse_transform(self, X):
        check_is_fitted(self, "domain_")
        return dst_inverse(X, self.domain_, fast=self.fast)
