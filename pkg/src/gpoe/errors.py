"""Exception types raised across the package."""


class GPoEError(Exception):
    """Base class for all package errors."""


class InputError(GPoEError, ValueError):
    """Malformed or inconsistent user-supplied data."""


class NumericalError(GPoEError, ArithmeticError):
    """A linear-algebra or floating-point failure that cannot be recovered."""


class UsageError(GPoEError, RuntimeError):
    """An operation was called on an object that does not support it."""


class MetricError(GPoEError, ValueError):
    """A metric is undefined for the supplied values."""


class OracleError(GPoEError, ArithmeticError):
    """The numerical-integration oracle could not resolve the density."""
