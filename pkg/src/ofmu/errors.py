"""Exception hierarchy shared by every ofmu module."""


class OfmuError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(OfmuError, ValueError):
    """An argument violates a structural contract (shape, dimension)."""


class InvalidArgument(OfmuError, ValueError):
    """An argument is well-formed but outside the accepted domain."""


class NumericalFailure(OfmuError, ArithmeticError):
    """A probe or evaluation produced a non-finite value."""

    def __init__(self, message, coordinate=None, method=None):
        super().__init__(message)
        self.coordinate = coordinate
        self.method = method


class UndefinedCorrelation(OfmuError, ValueError):
    """Rank correlation requested for a sequence with zero rank variance."""


class DivergenceError(OfmuError, ArithmeticError):
    """An optimizer iterate blew up.

    ``step`` is the global step index at which the guard tripped and
    ``trajectory`` holds whatever was recorded before the failure.
    """

    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class PreconditionError(OfmuError, ValueError):
    """A verification check was asked to run outside its hypotheses."""


class ConfigError(OfmuError, ValueError):
    """Experiment configuration failed schema or semantic validation."""
