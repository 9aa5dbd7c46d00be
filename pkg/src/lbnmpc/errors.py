"""Exception hierarchy shared by every module."""


class LbnmpcError(Exception):
    """Base class for all package errors."""


class InvalidArgument(LbnmpcError, ValueError):
    pass


class NumericalFailure(LbnmpcError, ArithmeticError):
    pass


class TrainingFailure(LbnmpcError):
    """Raised when hyperparameter training diverges.

    ``last_params`` holds the last finite iterate so callers can fall back.
    """

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class SingularityError(LbnmpcError, ArithmeticError):
    """Spatial reformulation undefined (s-dot too small or 1 - zeta*e_y ~ 0)."""


class PlantStall(LbnmpcError):
    pass


class LocalizationError(LbnmpcError):
    pass
