"""Exception hierarchy shared by every milfuse module."""


class MilfuseError(Exception):
    pass


class ShapeError(MilfuseError, ValueError):
    pass


class ContractError(MilfuseError, ValueError):
    pass


class ValidationError(MilfuseError, ValueError):
    pass


class EmptyDatasetError(ValidationError):
    pass


class StratificationError(ValidationError):
    pass


class PairingError(ValidationError):
    pass


class UndefinedAUCError(MilfuseError, ValueError):
    pass


class NumericError(MilfuseError, ArithmeticError):
    pass


class FormatError(MilfuseError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class DivergenceError(MilfuseError):
    """Training produced a non-finite loss.

    ``params`` holds the last checkpoint whose losses were all finite, so callers
    can persist partial work.
    """

    def __init__(self, message: str, params=None, stage: str | None = None, history=None):
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)
        self.params = params
        self.stage = stage
        self.history = history or []
