"""Exception hierarchy shared by every fabseg module."""


class FabsegError(Exception):
    """Base class for all errors raised by fabseg."""


class ShapeError(FabsegError, ValueError):
    pass


class NumericalError(FabsegError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InvalidRange(FabsegError, ValueError):
    pass


class InvalidArgument(FabsegError, ValueError):
    pass


class InvalidState(FabsegError, RuntimeError):
    pass


class EmptyInput(FabsegError, ValueError):
    pass


class NoEligiblePixels(FabsegError, ValueError):
    pass


class InvalidPrompt(FabsegError, ValueError):
    pass


class InvalidGrid(FabsegError, ValueError):
    pass


class DataError(FabsegError, ValueError):
    pass


class CorruptCheckpoint(FabsegError, ValueError):
    pass


class SchemaError(FabsegError, ValueError):
    pass


class UsageError(FabsegError):
    pass
