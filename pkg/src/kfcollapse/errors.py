"""Exception types shared across the package."""


class InputContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(ArithmeticError):
    """Raised when a computation breaks down numerically.

    Parameters
    ----------
    message : str
        Human readable description.
    step : int, optional
        Time index at which the failure occurred, if any.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ConditioningError(NumericalError):
    """A matrix that must be inverted is numerically singular."""


class ConditionViolation(NumericalError):
    """An observability-type condition required by a formula fails."""


class ConditioningWarning(RuntimeWarning):
    """A result was computed from an ill-conditioned linear system."""
