"""Exception hierarchy shared by every module."""


class LatentViError(Exception):
    """Base class for all package errors."""


class DomainError(LatentViError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DimensionError(LatentViError, ValueError):
    """Array shapes do not agree."""


class DecompositionError(LatentViError, ValueError):
    """A matrix that must be positive definite is not."""


class CapabilityError(LatentViError, TypeError):
    """The model does not support the requested operation."""


class ConfigError(LatentViError, ValueError):
    """Invalid or unknown configuration."""


class NumericalError(LatentViError, ArithmeticError):
    """An objective or iterate became non-finite.

    ``state`` carries whatever the caller needs to inspect or checkpoint
    the failing iterate.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
