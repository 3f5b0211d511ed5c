"""Exception types shared across the workbench."""


class ValidationError(ValueError):
    """An input violates a documented precondition or invariant."""


class EmptyTargetError(ValidationError):
    """A target with no scatterers was passed where one is required."""


class DatasetIOError(RuntimeError):
    """Reading or writing a dataset record failed; message carries context."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; ``epoch`` is the offender."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
