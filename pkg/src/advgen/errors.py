"""Exception hierarchy for the package.

Every error raised by this package derives from AdvGenError so callers can
catch one type at the CLI boundary and map it to an exit code.
"""


class AdvGenError(Exception):
    """Base class for all package errors."""


class DimensionError(AdvGenError):
    """Tensor shape or dimensionality mismatch between components."""


class InvalidInputError(AdvGenError):
    """Input values outside the accepted domain (NaN pixels, negative step, ...)."""


class ContractError(AdvGenError):
    """A precondition at a module boundary was violated (e.g. non-unit rows)."""


class ConfigError(AdvGenError):
    """Bad, missing, or inconsistent configuration."""


class DegenerateBatchError(AdvGenError):
    """Batch too small for the requested pairing scheme."""


class EmptySourceError(AdvGenError):
    """A data source yielded no usable items."""


class IngestionError(AdvGenError):
    """A dataset path could not be read in the declared layout."""


class LoadError(AdvGenError):
    """A weight or artifact file is missing, truncated, or corrupt."""


class CheckpointError(LoadError):
    """Checkpoint file failed to load or failed its integrity check."""


class TrainingDivergedError(AdvGenError):
    """Loss became non-finite during optimization."""
