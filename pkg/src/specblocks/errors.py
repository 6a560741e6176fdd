"""Exception hierarchy shared by all modules."""


class SpecBlocksError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(SpecBlocksError, ValueError):
    """A precondition on an argument is violated."""


class NumericError(SpecBlocksError, ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    ``location`` carries whatever context the raiser has (node index,
    sample index, ``(step, substep)`` pair, ...).
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class TrainingError(SpecBlocksError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IncompatibleBaseplateError(SpecBlocksError):
    """A checkpoint or dataset was produced on a different baseplate."""


class ParseError(SpecBlocksError, ValueError):
    """A file could not be parsed or has an unsupported version."""
