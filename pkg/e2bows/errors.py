from typing import Optional


class E2BowsError(Exception):
    """Base class for every error raised by the package."""

    pass


class DimensionError(E2BowsError, ValueError):
    """Custom exception for shape and length mismatches."""

    pass


class NumericError(E2BowsError, ArithmeticError):
    """Custom exception for non-finite values.

    ``component`` names the loss term or tensor that went bad, so a failed
    training step says which part of the objective blew up.
    """

    def __init__(self, message: str, component: Optional[str] = None):
        self.component = component
        if component:
            message = f"{component}: {message}"
        super().__init__(message)


class FormatError(E2BowsError, ValueError):
    """Custom exception for malformed files.

    ``offset`` is the byte offset for binary formats and the 1-based line
    number for text formats.
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class ArgumentError(E2BowsError, ValueError):
    """Custom exception for invalid call arguments."""

    pass


class Invalid(ArgumentError):
    """Raised by validators when a configured value is unusable."""

    pass


class ConfigError(E2BowsError):
    """Custom exception for unreadable configuration files."""

    pass
