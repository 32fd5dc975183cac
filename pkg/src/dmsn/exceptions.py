"""Exception hierarchy used across the package."""


class DMSNError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DMSNError, ValueError):
    """Invalid or inconsistent configuration."""


class PreconditionError(DMSNError, ValueError):
    """An operation was called with inputs violating its contract."""


class ShapeError(PreconditionError):
    """Array or feature map has an unusable shape."""


class NumericFaultError(DMSNError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class UnknownBranchError(DMSNError, LookupError):
    """A branch id outside ``[0, M]`` was requested."""


class AggregationError(DMSNError, ValueError):
    """Parameter sets cannot be aggregated (key or shape mismatch)."""


class DatasetIOError(DMSNError, OSError):
    """Dataset or checkpoint could not be read or written."""


class DatasetCorruptionError(DatasetIOError):
    """Stored data does not match its recorded checksum."""


class CheckpointError(DatasetIOError):
    """Checkpoint cannot be loaded or resumed."""
