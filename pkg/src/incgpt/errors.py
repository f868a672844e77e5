"""Exception taxonomy shared across the package."""


class IncgptError(Exception):
    """Base class for all package errors."""


class DimensionError(IncgptError):
    """Array shapes do not satisfy an operation's contract."""


class NumericError(IncgptError):
    """Non-finite values encountered where finite values are required."""


class ConfigError(IncgptError):
    """Invalid configuration values."""


class ScheduleError(IncgptError):
    """Inconsistent stage/phase/depth bookkeeping."""


class DataError(IncgptError):
    """Invalid or insufficient input data."""


class AssumptionError(IncgptError):
    """A closed-form result was requested outside its validity domain."""
