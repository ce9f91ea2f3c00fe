"""Exception types shared across the package."""


class HubnetError(Exception):
    """Base class for all package errors."""


class ShapeError(HubnetError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(HubnetError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class EmptyMemoryError(HubnetError, ValueError):
    """Attention was asked to run over zero memory rows."""


class ConfigError(HubnetError, ValueError):
    """A configuration value or flag combination is invalid."""


class DataFormatError(HubnetError, IOError):
    """A tensor file or manifest is missing, truncated or inconsistent."""
