"""Exception hierarchy shared by every gradflow module."""


class GradflowError(Exception):
    """Base class for all errors raised by gradflow."""


class ConfigurationError(GradflowError, ValueError):
    pass


class DomainError(GradflowError, ValueError):
    pass


class ShapeError(GradflowError, ValueError):
    pass


class StateError(GradflowError, RuntimeError):
    pass


class InsufficientDataError(GradflowError, ValueError):
    pass


class ConsistencyError(GradflowError, ValueError):
    pass


class NumericError(GradflowError, ArithmeticError):
    """A non-finite value appeared; ``where`` names the step or layer."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(GradflowError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
