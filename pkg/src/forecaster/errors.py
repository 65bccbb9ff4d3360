"""Exception types shared across the package."""


class ForecasterError(Exception):
    """Base class for all package-specific errors."""


class InsufficientDataError(ForecasterError):
    """Too few samples to compute the requested statistic."""


class ConvergenceError(ForecasterError):
    """Iterative solver did not reach its tolerance within the iteration budget."""

    def __init__(self, message, iterations=None, primal_residual=None, dual_residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual


class InvalidPrecisionError(ForecasterError):
    """Precision matrix violates positive-definiteness requirements."""


class DimensionError(ForecasterError):
    """Operands have incompatible shapes."""


class ConfigurationError(ForecasterError):
    """Inconsistent configuration (node counts, head counts, ranges, hashes)."""


class IntegrityError(ForecasterError):
    """Stored parameters violate their sparsity masks or the file is inconsistent."""


class StaleTapeError(ForecasterError):
    """backward() called a second time without re-running the forward pass."""


class NonFiniteGradientError(ForecasterError):
    """A gradient buffer contains NaN or infinity."""


class NonFiniteLossError(ForecasterError):
    """Training loss became NaN or infinity."""


class ParseError(ForecasterError):
    """A file could not be parsed; carries row/column context where known."""


class CadenceError(ForecasterError):
    """Timestamps are not gap-free hourly or two files disagree on timestamps."""


class WindowError(ForecasterError):
    """Not enough history (or future) rows to assemble the requested window."""


class EmptyEvaluationError(ForecasterError):
    """Evaluation was requested on an empty prediction set."""


class SingularDesignError(ForecasterError):
    """Least-squares design matrix is rank deficient beyond jitter rescue."""


class InsufficientHistoryError(ForecasterError):
    """Forecast requested with fewer history rows than the model order."""


class DependencyError(ForecasterError):
    """A pipeline stage is missing an upstream artifact."""
