"""Exception hierarchy shared by every module."""


class TwinsError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TwinsError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(TwinsError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(TwinsError, RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class ConfigError(TwinsError, ValueError):
    """Invalid configuration value. ``field`` names the offending config path."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DataError(TwinsError, ValueError):
    """Dataset contents violate an operation's requirements."""


class FormatError(TwinsError, ValueError):
    """A file does not follow its declared binary/text format."""
