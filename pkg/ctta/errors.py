from typing import Optional, Sequence


class DimensionError(ValueError):
    """Raised when array shapes or vector lengths disagree."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class DomainError(ValueError):
    """Raised when an input lies outside a function's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """Raised when a numeric operation produces NaN or Inf."""


class ConfigError(ValueError):
    """Raised for malformed scenario or configuration input."""


class AdaptationError(RuntimeError):
    """A numeric failure inside the online loop, tagged with the batch it happened on."""

    def __init__(self, batch_index: int, cause: BaseException):
        self.batch_index = batch_index
        self.cause = cause
        super().__init__(f"batch {batch_index}: {type(cause).__name__}: {cause}")


class PretrainingError(RuntimeError):
    """Source pretraining diverged or missed the error bar."""

    def __init__(self, message: str, loss_trace: Optional[Sequence[float]] = None):
        self.loss_trace = list(loss_trace or [])
        super().__init__(message)
