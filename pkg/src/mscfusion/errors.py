"""Exception taxonomy shared across the package.

Each class maps to one CLI error category so commands can exit with a
categorized message.
"""


class MscfusionError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigurationError(MscfusionError):
    """Invalid specs, shapes, or option combinations."""

    category = "config"


class DataError(MscfusionError):
    """Bad input data (non-finite values, missing volumes, bad files)."""

    category = "data"


class NumericError(MscfusionError):
    """Non-finite intermediate results."""

    category = "numeric"


class IntegrityError(MscfusionError):
    """Checkpoint or file checksum mismatch."""

    category = "integrity"


class DependencyError(MscfusionError):
    """A command was run before its upstream artifacts exist."""

    category = "dependency"


class TrainingDivergedError(MscfusionError):
    """Pretraining produced a non-finite loss."""

    category = "training"

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
