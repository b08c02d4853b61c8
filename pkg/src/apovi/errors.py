"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class PSDError(ValueError):
    """A matrix that must be positive definite is not."""


class TapeError(RuntimeError):
    """A recorded graph was used incorrectly (non-scalar loss, reuse)."""


class NumericalError(FloatingPointError):
    """An operation produced a non-finite value from finite inputs."""


class DataError(ValueError):
    """Input data violates a model or format contract."""


class FormatError(DataError):
    """A binary file has the wrong magic number or layout."""


class TruncationError(DataError):
    """A binary file ended before its declared payload."""


class CheckpointVersionError(FormatError):
    """Checkpoint magic or format version is not recognised."""


class CheckpointShapeError(DataError):
    """Checkpoint shape table disagrees with the target parameters."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite objective."""
