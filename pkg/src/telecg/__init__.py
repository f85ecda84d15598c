"""telecg: synthetic ECG telemetry, curation, contrastive pretraining,
downstream evaluation, and continuous annotation."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, DomainError, FormatError,
                     NumericalError, PlanError, TelecgError)

__all__ = [
    "__version__",
    "ConfigurationError", "DataError", "DomainError", "FormatError",
    "NumericalError", "PlanError", "TelecgError",
]
