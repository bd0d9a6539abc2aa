"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``hfbrimae.cli``).
"""


class HfbriError(Exception):
    """Base class for all package errors."""


class ParseError(HfbriError, ValueError):
    """Malformed point-cloud file. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCloudError(HfbriError, ValueError):
    pass


class SizeError(HfbriError, ValueError):
    """Requested count exceeds the number of available points."""


class ShapeError(HfbriError, ValueError):
    pass


class ConfigError(HfbriError, ValueError):
    pass


class DataError(HfbriError, ValueError):
    pass


class NumericError(HfbriError, ArithmeticError):
    """Non-finite loss during training; ``step`` is the offending step index."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)
