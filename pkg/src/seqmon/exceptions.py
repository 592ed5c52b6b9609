"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so keep the three top-level
families (configuration, data, numerical) distinct.
"""


class SeqmonError(Exception):
    """Base class for all package errors."""


class ConfigError(SeqmonError):
    """Invalid configuration, schedule, hypothesis, or option combination."""


class DataError(SeqmonError):
    """Malformed or inconsistent input data."""


class NumericalError(SeqmonError):
    """Numerical failure: singular systems, failed calibration, divergence."""


class SingularMatrixError(NumericalError):
    """A matrix required to be positive definite was not invertible."""

    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


class ConvergenceError(NumericalError):
    """An iterative solver did not converge."""


class SeparationError(ConvergenceError):
    """Linear predictor ran away, indicating (quasi-)separation."""
