"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error types should
subclass one of the three roots below rather than raising bare ValueError.
"""


class TelecgError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TelecgError):
    """Invalid configuration value, unknown key, or malformed override."""


class PlanError(ConfigurationError):
    """Record plan edit that violates scheduling constraints."""


class DataError(TelecgError):
    """Unreadable, truncated, or structurally inconsistent data."""


class FormatError(DataError):
    """Binary container whose header or payload fails validation."""


class DomainError(TelecgError, ValueError):
    """Argument outside the documented domain of an operation."""


class NumericalError(TelecgError):
    """Non-finite loss or other numerical failure during training."""
