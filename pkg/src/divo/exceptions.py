"""Exception hierarchy shared by every module."""


class DivoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DivoError, ValueError):
    """Shapes, dimensions or hyperparameters do not fit together."""


class UsageError(DivoError, RuntimeError):
    """An operation was called in a state where it is not allowed."""


class NumericError(DivoError, FloatingPointError):
    """A non-finite value appeared in a forward computation."""


class TrainingDivergenceError(NumericError):
    """A gradient or loss became non-finite during optimization."""


class FormatError(DivoError, ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
