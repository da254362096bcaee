"""Exception hierarchy shared by every module."""


class SeqDepthError(Exception):
    """Base class for all errors raised by seqdepth."""


class DimensionMismatchError(SeqDepthError, ValueError):
    """Two tensors disagree along a named axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class InvalidConfigError(SeqDepthError, ValueError):
    pass


class GradientContractError(SeqDepthError):
    """backward() was asked for something it cannot provide (e.g. a non-scalar loss)."""


class TapeIntegrityError(SeqDepthError):
    pass


class NumericalError(SeqDepthError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DatasetError(SeqDepthError):
    pass


class DatasetTooShortError(DatasetError):
    pass


class DatasetIntegrityError(DatasetError):
    pass


class ImageFormatError(DatasetError):
    """Unsupported or malformed PPM/PGM file."""


class CheckpointError(SeqDepthError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class SimulationError(SeqDepthError):
    pass
