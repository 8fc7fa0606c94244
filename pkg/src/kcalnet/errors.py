"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A model or training configuration field is invalid."""


class DatasetError(ValueError):
    """A dataset is empty, malformed, or missing required columns."""


class CheckpointError(RuntimeError):
    """A checkpoint file is truncated, corrupt, or of an unknown version."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


class PairingError(ValueError):
    """Two prediction sets cannot be paired by dish id."""
