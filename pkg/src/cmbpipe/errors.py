"""Exception types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for all pipeline errors."""


class MissingFile(PipelineError, FileNotFoundError):
    pass


class ShapeMismatch(PipelineError, ValueError):
    pass


class NonFiniteVoxel(PipelineError, ValueError):
    pass


class UnknownCohort(PipelineError, ValueError):
    pass


class DegenerateVolume(PipelineError, ValueError):
    pass


class IndexOutOfRange(PipelineError, IndexError):
    pass


class NoLesions(PipelineError):
    pass


class NoLesionsInDataset(PipelineError):
    pass


class EmptyMask(PipelineError):
    pass


class PlacementFailure(PipelineError):
    pass


class MissingModel(PipelineError, FileNotFoundError):
    pass


class BackendFailure(PipelineError, RuntimeError):
    """Wraps a model backend fault together with where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class StageError(PipelineError):
    """Carries the pipeline stage name in front of the underlying error."""

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error
