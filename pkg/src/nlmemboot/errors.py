"""Exception hierarchy shared by every module."""


class InvalidInputError(ValueError):
    """Inputs violate a documented precondition."""


class InvalidConfigError(ValueError):
    """A configuration cannot be honoured for the given data."""


class EstimationError(RuntimeError):
    """SAEM could not produce an estimate.

    The convergence trace up to the failure is kept on ``trace`` so callers can
    inspect where things went wrong.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class NumericError(EstimationError):
    """Non-finite values appeared during estimation."""


class SamplerError(RuntimeError):
    """Metropolis-Hastings chains stopped accepting proposals."""


class MissingPrerequisiteError(InvalidConfigError):
    """An earlier step (for example conditional sampling) has not been run."""
