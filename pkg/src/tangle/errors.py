"""Exception hierarchy shared by every module."""


class TangleError(Exception):
    """Base class for all domain errors raised by this package."""


class DimensionError(TangleError, ValueError):
    pass


class ParameterError(TangleError, ValueError):
    pass


class InputError(TangleError, ValueError):
    pass


class ContractError(TangleError, ValueError):
    pass


class ConfigurationError(TangleError, ValueError):
    pass


class NumericalError(TangleError, ArithmeticError):
    pass


class TrainingError(NumericalError):
    pass


class MetricError(TangleError, ValueError):
    pass


class FormatError(TangleError, ValueError):
    """Malformed or unsupported file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(TangleError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
