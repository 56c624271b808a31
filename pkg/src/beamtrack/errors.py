"""Exception hierarchy shared by every module."""


class BeamtrackError(Exception):
    pass


class InvalidInputError(BeamtrackError, ValueError):
    pass


class ShapeError(BeamtrackError, ValueError):
    pass


class EmptyChannelError(InvalidInputError):
    pass


class DegenerateInputError(BeamtrackError, ValueError):
    pass


class ValidationError(BeamtrackError, ValueError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(BeamtrackError, ArithmeticError):
    pass


class InvalidStateError(BeamtrackError, RuntimeError):
    pass


class TrainingFailure(BeamtrackError, RuntimeError):
    """Raised when the loss turns non-finite; carries the last finite parameters."""

    def __init__(self, message: str, checkpoint=None, epoch: int | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class StageError(BeamtrackError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
