"""Exception hierarchy shared across the package.

The CLI maps each family to a distinct exit status.
"""


class ProtfuseError(Exception):
    """Base class for all package errors."""


class ContractViolation(ProtfuseError, ValueError):
    """A caller broke an operation's precondition (bad shape, bad range)."""


class DataFault(ProtfuseError):
    """Input data is malformed or violates a domain rule (cycle, leakage)."""


class NumericFault(ProtfuseError, ArithmeticError):
    """A non-finite value appeared during computation."""


class ConvergenceFailure(ProtfuseError, RuntimeError):
    """An iterative solver exhausted its budget before meeting tolerance."""

    def __init__(self, message, last_error=None):
        super().__init__(message)
        self.last_error = last_error


class ConfigError(ProtfuseError, ValueError):
    """Unknown or malformed configuration."""
