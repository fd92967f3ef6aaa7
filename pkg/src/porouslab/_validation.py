"""Input checks and the package's exception types."""

import numpy as np


class DimensionError(ValueError):
    """Array shape incompatible with the grid or mode count."""


class SolverError(RuntimeError):
    """Nonlinear solve failed to reach its tolerance."""

    def __init__(self, message, residual=np.nan, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class ConventionMismatchError(ValueError):
    """Samples were drawn under a different noise convention than requested."""


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def as_field_array(a, size, what="field"):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape[-1] != size:
        raise DimensionError(f"{what} has trailing size {a.shape[-1:] or ()}; expected {size}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    return a


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
