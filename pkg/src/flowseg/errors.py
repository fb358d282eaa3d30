"""Shared exception types."""


class FlowsegError(Exception):
    """Base class for package errors."""


class ArgumentError(FlowsegError, ValueError):
    """Invalid argument value."""


class ShapeError(FlowsegError, ValueError):
    """Array shape mismatch."""


class ConfigError(FlowsegError, ValueError):
    """Inconsistent configuration (e.g. bank mode vs flow mode)."""


class UsageError(FlowsegError, RuntimeError):
    """Operation called in an illegal state."""


class NumericError(FlowsegError, ArithmeticError):
    """Non-finite values encountered in a numeric pipeline."""


class EmptyForegroundError(FlowsegError, ValueError):
    """A prompt kind that needs foreground was given an empty mask."""


class EmptyMaskError(FlowsegError, ValueError):
    """A boundary-distance metric was given an empty mask."""


class FlowFormatError(FlowsegError, ValueError):
    """Malformed .flow or checkpoint payload."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
