"""Exception types raised across fsaudit."""


class FsauditError(Exception):
    """Base class for all fsaudit errors."""


class ConfigurationError(FsauditError, ValueError):
    pass


class InfeasibleSampleError(FsauditError, ValueError):
    """Not enough users or images to draw the requested episode/probe."""


class SplitError(FsauditError, ValueError):
    pass


class TrainingDivergedError(FsauditError, RuntimeError):
    pass


class CheckpointKindError(FsauditError, TypeError):
    """A checkpoint was loaded as the wrong model kind."""


class ProbeMismatchError(FsauditError, TypeError):
    """Model kind and probe architecture disagree."""


class FeatureLayoutError(FsauditError, ValueError):
    """Audit feature length/layout does not match what the auditor expects."""


class StageError(FsauditError, RuntimeError):
    """Wraps a failure inside an experiment stage with the stage name and seed."""

    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed (seed={seed}): {cause!r}")
        self.stage = stage
        self.seed = seed
        self.cause = cause
