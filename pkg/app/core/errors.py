from typing import Any, List, Optional


class UpcycleError(Exception):
    def __init__(self, message: str = ""):
        self.message = message or "Unexpected upcycling error"
        super().__init__(self.message)

    def __str__(self):
        return f"{self.__class__.__name__}: {self.message}"


class DimensionError(UpcycleError):
    pass


class ContractError(UpcycleError):
    pass


class NumericalError(UpcycleError):
    pass


class ConfigurationError(UpcycleError):
    pass


class AlreadySparseError(UpcycleError):
    def __init__(self, message: str = "checkpoint already contains MoE layers"):
        super().__init__(message)

    def __str__(self):
        return self.message


class CheckpointFormatError(UpcycleError):
    """Raised by the checkpoint reader; names the first violated invariant."""

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"[{invariant}] {message}")


class TrainingDivergedError(UpcycleError):
    def __init__(self, message: str, checkpoint: Any = None, metrics: Optional[List[Any]] = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.metrics = metrics or []
