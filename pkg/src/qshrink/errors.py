"""Exception hierarchy shared by the estimation, simulation and CLI layers."""


class QShrinkError(Exception):
    """Base class for all package errors."""


class DomainError(QShrinkError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UnsupportedError(DomainError):
    """The requested order, dimension or tag is not implemented."""


class SingularDesignError(QShrinkError, ValueError):
    """Design matrix is rank deficient or too ill conditioned to fit."""


class SingularBlockError(QShrinkError, ValueError):
    """A covariance block or Schur complement is not positive definite."""


class ConvergenceError(QShrinkError, RuntimeError):
    """Iterative solver hit its iteration cap.

    The best iterate found so far is kept on ``best`` so callers can still
    inspect it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SchemaError(QShrinkError, ValueError):
    """Tabular input does not match the expected schema."""
