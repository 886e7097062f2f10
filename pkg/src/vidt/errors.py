"""Exception types shared across the package."""


class VidtError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VidtError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(VidtError, ValueError):
    """A configuration value is invalid or unsupported."""


class InfeasibleMatchError(VidtError, ValueError):
    """More ground-truth objects than prediction slots."""


class CheckpointVersionError(VidtError):
    """Checkpoint was written by an incompatible format version."""


class ParseError(VidtError, ValueError):
    """Malformed input file. ``offset`` is the byte offset of the failure."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class AttentionUnavailableError(VidtError):
    """Requested attention map for a stage that has no cross-attention."""


class TrainingDivergedError(VidtError):
    """Loss became non-finite during training."""
