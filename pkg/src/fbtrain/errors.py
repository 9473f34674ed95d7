"""Exception types shared across the simulator."""


class FbtrainError(Exception):
    """Base class for all simulator errors."""


class InvalidParameterError(FbtrainError, ValueError):
    """A caller-supplied parameter is out of range or inconsistent."""


class InvalidStateError(FbtrainError, RuntimeError):
    """An operation was invoked on an object missing required content."""


class InfeasiblePlanError(FbtrainError, ValueError):
    """A pilot plan cannot satisfy its orthogonality requirements."""


class SingularityError(FbtrainError, RuntimeError):
    """A matrix inversion failed and no regularization was allowed."""


class NumericFailureError(FbtrainError, RuntimeError):
    """An iterative numeric routine failed to converge; message carries diagnostics."""
