"""Equilibrium propagation in deterministic, thermal and quantum regimes."""
from .errors import (
    DegenerateEigenstateError,
    DimensionError,
    DivergenceError,
    EigenstateTrackingError,
    EqPropError,
    NonConvergenceError,
    NotPositiveDefiniteError,
    NumericalError,
    ReweightingDegeneracyError,
    UnsupportedActivationError,
    ValidationError,
)
from .network import ClampContext, Network, cost, derivative_tensors, energy, grad_theta, grad_z
from .report import GradientReport

__version__ = "0.1.0"
