"""Exception hierarchy shared by all tcore modules."""


class TCoreError(Exception):
    """Base class for every error raised by tcore."""


class ParameterError(TCoreError, ValueError):
    """An argument violates an operation precondition."""


class FormatError(TCoreError):
    """On-disk data does not follow the expected layout."""


class CorruptLabelError(FormatError):
    pass


class DegenerateSplitError(TCoreError):
    """A split would leave some class without samples."""


class GeometryError(TCoreError, ValueError):
    """Trigger or partition geometry does not fit the target tensor."""


class InsufficientPoolError(TCoreError):
    """Not enough samples to draw the requested poisons from."""


class AttackFailure(TCoreError):
    """An attack finished without meeting its success criterion."""


class TrainingDiverged(TCoreError):
    """A loss became non-finite during optimization."""


class ContractViolation(TCoreError):
    """A trainable-group selector is incompatible with the operation."""


class UnlearnStall(TCoreError):
    """Selective unlearning never reached the accuracy floor."""


class StageError(TCoreError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
