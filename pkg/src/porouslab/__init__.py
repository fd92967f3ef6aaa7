"""Spectral Galerkin tools for the stochastic porous-media equation on (0, L).

Submodules: ``spectral`` (sine basis, norms, covariance), ``nonlinearity``
(Psi and its energy), ``dissipative`` (resolvent, Yosida regularization),
``sde`` (drift-implicit sampler, moments), ``kolmogorov`` (cylinder
functions and generator checks), ``control`` (feedback controllability),
``config`` and ``cli``.
"""

__version__ = "0.1.0"

from porouslab._validation import ConfigError, ConventionMismatchError, DimensionError, SolverError

__all__ = ["__version__", "ConfigError", "ConventionMismatchError", "DimensionError", "SolverError"]
