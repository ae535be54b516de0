"""Exception types shared across the package."""


class LapregError(Exception):
    """Base class for all lapreg errors."""


class ValidationError(LapregError, ValueError):
    """Invalid argument or configuration value."""


class ShapeMismatchError(ValidationError):
    """Two grids that must share a shape do not."""

    def __init__(self, what: str, shape_a, shape_b):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{what}: shapes {self.shape_a} and {self.shape_b} do not match")


class GridSizeError(ValidationError):
    """Grid dimensions violate a precondition (e.g. not divisible by 16)."""


class VolumeFormatError(LapregError):
    """A volume file is corrupt or not a recognized format."""


class VolumeDimensionError(VolumeFormatError):
    """A volume file holds data of unsupported dimensionality."""


class CheckpointError(LapregError):
    """A checkpoint file is truncated or otherwise unreadable."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version does not match this library."""


class EmptyMaskError(ValidationError):
    """A surface-distance metric was requested for an empty mask."""


class FieldGenerationError(LapregError):
    """The synthetic-field generator could not build a fold-free field."""


class NonFiniteLossError(LapregError):
    """Training produced a non-finite loss term."""

    def __init__(self, step: int, term: str, value: float):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at step {step}: term '{term}' = {value}")
