class DBENetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(DBENetError, ValueError):
    pass


class ShapeError(DBENetError, ValueError):
    pass


class DegenerateSampleError(DBENetError):
    pass


class EmptyInputError(DBENetError, ValueError):
    pass


class EmptyContextError(DBENetError, ValueError):
    pass


class EmptyPositivesError(DBENetError):
    pass


class InsufficientDataError(DBENetError):
    pass


class UndefinedMetricError(DBENetError):
    pass


class TransferError(DBENetError):
    pass


class FormatError(DBENetError):
    """Malformed checkpoint, PLY or manifest content."""

    def __init__(self, msg: str, offset: int | None = None, line: int | None = None):
        if offset is not None:
            msg = f"{msg} (byte offset {offset})"
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.offset = offset
        self.line = line


class GenerationError(DBENetError):
    pass
