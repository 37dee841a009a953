"""Tiny multi-task dense prediction toolkit with gradient-weighting strategies."""

from .errors import (
    ComparisonRefused,
    ConfigError,
    ContractViolation,
    DegenerateTargetError,
    ImportFormatError,
    MtlError,
    NumericError,
    SolverFailure,
    StorageError,
)

__version__ = "0.1.0"
