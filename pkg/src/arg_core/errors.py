"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so commands can translate
failures without a lookup table.
"""


class ArgCoreError(Exception):
    exit_code = 1


class ConfigError(ArgCoreError):
    """Invalid configuration or usage (bad key, impossible setting)."""

    exit_code = 2


class DimensionError(ArgCoreError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class DataError(ArgCoreError, ValueError):
    """Input data violates a contract (label out of range, degenerate box)."""

    exit_code = 2


class ParseError(DataError):
    """A dataset file is malformed. ``line`` is 1-based when known."""

    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(ArgCoreError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 4


class CheckFailure(ArgCoreError):
    """A verification (gradient check) did not pass."""

    exit_code = 5
