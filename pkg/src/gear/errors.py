"""Exception types shared across the package."""


class GearError(Exception):
    """Base class for all package errors."""


class DimensionError(GearError, ValueError):
    pass


class ContractError(GearError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(GearError, ValueError):
    pass


class NumericError(GearError, ArithmeticError):
    pass


class ParseError(GearError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IngestionError(GearError, ValueError):
    pass


class UndefinedMetricError(GearError, ValueError):
    pass


class TrainingAborted(GearError, RuntimeError):
    def __init__(self, message: str, batch_id: str | None = None, dump: dict | None = None):
        self.batch_id = batch_id
        self.dump = dump or {}
        super().__init__(message)
