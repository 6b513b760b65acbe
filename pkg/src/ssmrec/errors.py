"""Exception types shared across the package."""


class SsmRecError(Exception):
    """Base class for all package errors."""


class ShapeError(SsmRecError, ValueError):
    pass


class ParameterError(SsmRecError, ValueError):
    pass


class EvaluationError(SsmRecError, ArithmeticError):
    """A computation produced or received non-finite values."""


class InvariantError(SsmRecError, ValueError):
    pass


class MemoryLimitExceeded(SsmRecError, MemoryError):
    """Tracked allocations crossed the configured byte limit."""


class ConfigError(SsmRecError, ValueError):
    pass


class DataError(SsmRecError, ValueError):
    pass


class DataQualityError(DataError):
    pass


class CheckpointError(SsmRecError, ValueError):
    pass


class NonFiniteGradientError(EvaluationError):
    pass


class DivergenceError(SsmRecError, RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CapacityError(SsmRecError, ValueError):
    """Input longer than a model's fixed capacity."""
