"""Exception hierarchy shared across the package."""


class ResflowError(Exception):
    """Base class for all package errors."""


class ConfigError(ResflowError, ValueError):
    pass


class GridRangeError(ResflowError, ValueError):
    pass


class ShapeError(ResflowError, ValueError):
    pass


class ParseError(ResflowError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(ParseError):
    pass


class ValidationError(ResflowError, ValueError):
    pass


class WindowError(ResflowError, ValueError):
    pass


class SplitError(ResflowError, ValueError):
    pass


class NumericError(ResflowError, ArithmeticError):
    pass


class MetricError(ResflowError, ValueError):
    pass


class ConfigConflictError(ResflowError):
    pass
