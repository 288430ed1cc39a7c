"""Exception types shared across the package."""


class FedSimError(Exception):
    pass


class DimensionError(FedSimError, ValueError):
    """Parameter vector does not match the objective's parameter shape."""


class NumericError(FedSimError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class DivergenceError(NumericError):
    """Raised when a run blows up.

    ``step`` is the global step index at which non-finite parameters were
    first seen; ``records`` holds every round recorded before that point.
    """

    def __init__(self, message, step=None, records=None):
        super().__init__(message)
        self.step = step
        self.records = list(records) if records is not None else []


class ScheduleError(FedSimError, ValueError):
    pass


class ConfigError(FedSimError, ValueError):
    pass


class DatasetFormatError(FedSimError, ValueError):
    """Malformed dataset file; ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno
