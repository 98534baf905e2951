"""Exception types shared across the package."""


class GnssError(Exception):
    """Base class for all package errors."""


class ConfigError(GnssError, ValueError):
    """Invalid configuration key, value, or geometry."""


class StabilityError(GnssError, ValueError):
    """Requested time increment exceeds the explicit stability bound."""


class NumericalDivergence(GnssError, ArithmeticError):
    """State became non-finite (or unbounded) during time integration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(GnssError, ValueError):
    """Binary file does not match the expected layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(GnssError, ValueError):
    """Array dimensions do not match the declared contract."""
