"""Exception types shared across the package."""


class EvsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EvsegError):
    """Invalid or inconsistent configuration (unknown keys, bad values, missing files)."""


class InvalidArgumentError(EvsegError, ValueError):
    """An argument violates an operation's preconditions (shape/range mismatch)."""


class InvalidInputError(EvsegError, ValueError):
    """Input data violates a documented invariant (non-finite pixels, bad distributions)."""


class MalformedStreamError(InvalidInputError):
    """An event stream violates its invariants (unsorted, out of window, bad polarity)."""


class MalformedSequenceError(InvalidInputError):
    """A frame sequence violates its invariants (non-increasing timestamps, ragged frames)."""


class InsufficientInputError(InvalidArgumentError):
    """Not enough input to perform the operation (e.g. fewer than two frames)."""


class EventParseError(EvsegError):
    """A stored event file could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class NumericError(EvsegError):
    """A numeric failure (NaN/Inf) in a named component."""

    def __init__(self, message: str, component: str | None = None):
        super().__init__(message if component is None else f"{component}: {message}")
        self.component = component
