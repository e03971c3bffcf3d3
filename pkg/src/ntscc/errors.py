"""Exception types shared across the package."""


class NTSCCError(Exception):
    """Base class for all package errors."""


class ConfigError(NTSCCError):
    """Invalid, unknown, or missing configuration fields."""


class ShapeMismatchError(NTSCCError):
    """Tensor shapes violate an operation's contract."""


class OutOfRangeError(NTSCCError):
    """A query falls outside an interpolation table's hull."""


class StreamFormatError(NTSCCError):
    """Malformed symbol stream, side-info packet, or checkpoint."""
