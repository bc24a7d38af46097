"""Exception types shared across the toolkit."""


class CPKitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CPKitError):
    """Invalid configuration value (alpha, quantile level, RAPS parameters, ...)."""


class CalibrationError(CPKitError):
    """Calibration cannot proceed (e.g. empty score vector)."""


class DataError(CPKitError):
    """Malformed data (labels out of range, non-finite logits, ...)."""


class ShapeError(CPKitError):
    """Array dimensions do not match what the operation requires."""


class FormatError(CPKitError):
    """A record file cannot be parsed. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(CPKitError):
    """Training produced a non-finite loss. Carries the loss trajectory so far."""

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory) if trajectory is not None else []
