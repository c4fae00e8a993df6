"""Exception types shared across the package.

Plain invalid arguments raise ValueError; these classes cover the cases the
CLI maps to distinct exit codes.
"""


class ConfigError(ValueError):
    """Inconsistent or unusable run configuration."""


class DataFormatError(Exception):
    """Malformed or invalid input data (corpora, features, n-best files)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required."""
