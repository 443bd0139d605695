"""Exception hierarchy.

Validation problems derive from ``ValueError`` so callers can treat them as
bad input; numerical failures derive from ``NumericalError``.
"""


class EqPropError(Exception):
    """Base class for all package errors."""


class ValidationError(EqPropError, ValueError):
    """Malformed input: wrong shapes, broken invariants, bad config."""


class DimensionError(ValidationError):
    pass


class UnsupportedActivationError(ValidationError):
    pass


class NumericalError(EqPropError, ArithmeticError):
    """A computation produced NaN/inf or otherwise failed numerically."""


class DivergenceError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NotPositiveDefiniteError(NumericalError):
    pass


class DegenerateEigenstateError(NumericalError):
    def __init__(self, message, eigenvalues=()):
        super().__init__(message)
        self.eigenvalues = tuple(eigenvalues)


class EigenstateTrackingError(NumericalError):
    pass


class ReweightingDegeneracyError(NumericalError):
    def __init__(self, message, ess=None):
        super().__init__(message)
        self.ess = ess


class NonConvergenceError(NumericalError):
    pass
