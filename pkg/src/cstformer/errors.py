"""Exception types shared across the package."""


class CSTFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(CSTFormerError, ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class ConfigError(CSTFormerError, ValueError):
    """A configuration value is invalid or inconsistent with the data."""


class CapacityError(CSTFormerError, ValueError):
    """More simultaneous same-class events than the three output tracks can hold."""


class TooShortError(CSTFormerError, ValueError):
    """An audio clip is shorter than one analysis window."""


class ChecksumError(CSTFormerError, IOError):
    """An archive is truncated or its payload does not match the stored digest."""
