"""Exception types shared across the package."""


class AdvTrainError(Exception):
    """Base class for all errors raised by advtrain."""


class DimensionError(AdvTrainError, ValueError):
    """Tensor shapes do not conform.

    ``axes`` names the offending axes so callers can report them.
    """

    def __init__(self, message, axes=None):
        super().__init__(message)
        self.axes = axes


class StateError(AdvTrainError, RuntimeError):
    """An operation was called out of order (e.g. backprop before forward)."""


class ValidationError(AdvTrainError, ValueError):
    """An argument is outside its allowed range."""


class FormatError(AdvTrainError, ValueError):
    """A binary file does not follow its declared format."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header declares."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConsistencyError(AdvTrainError, RuntimeError):
    """Internal bookkeeping disagrees with the data it tracks."""


class ConfigError(AdvTrainError, ValueError):
    """A configuration key or value could not be accepted."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
