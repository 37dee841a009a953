"""Exception hierarchy shared across the toolkit.

Each class carries the CLI exit code it maps to so the command line layer
does not need a lookup table.
"""


class MtlError(Exception):
    exit_code = 1


class ContractViolation(MtlError, ValueError):
    """An operation was called with inputs outside its documented domain."""

    exit_code = 2


class ConfigError(MtlError, ValueError):
    exit_code = 2


class NumericError(MtlError, ArithmeticError):
    """A computation produced NaN or Inf."""

    exit_code = 1


class DegenerateTargetError(MtlError, ValueError):
    """A loss or metric has nothing to average over (empty mask, no labels)."""

    exit_code = 1


class SolverFailure(MtlError, RuntimeError):
    exit_code = 3

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StorageError(MtlError, OSError):
    """Reading or writing a dataset, checkpoint or report failed."""

    exit_code = 4


class ImportFormatError(StorageError):
    pass


class ComparisonRefused(MtlError):
    exit_code = 2
