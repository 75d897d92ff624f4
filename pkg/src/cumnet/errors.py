"""Exception hierarchy shared by every cumnet module."""


class CumnetError(Exception):
    """Base class for all library errors."""


class ConfigError(CumnetError, ValueError):
    """Invalid hyperparameter, schedule or experiment configuration."""


class CompositionError(CumnetError):
    """Layer shapes do not compose, or a network contradicts its own metadata."""


class NumericError(CumnetError, ArithmeticError):
    """A NaN or Inf appeared during computation.

    ``last_good`` optionally carries the most recent finite network so callers
    can recover after a divergent training run.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DomainError(CumnetError, ValueError):
    """An argument is outside the domain of the operation (e.g. a bad label)."""


class CheckpointError(CumnetError, OSError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unparsable header."""


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    """File ends before the fixed prefix or the declared header is complete."""


class CheckpointLengthError(CheckpointError):
    """Weight/mask blob sizes disagree with the shapes declared in the header."""


class MorphPreconditionError(CumnetError):
    """The morph cannot be guaranteed to preserve the network function here."""


class ForbiddenSiteError(MorphPreconditionError):
    """Widening the final classifier is not allowed."""


class LayerCollapseError(CumnetError):
    """Pruning would remove every filter of a layer."""


class ProvenanceError(CumnetError):
    """A morph/prune log does not match the network it is applied to."""


class AccountingError(CumnetError):
    pass


class DataParseError(CumnetError):
    """Malformed dataset file (bad magic, truncated payload...)."""


class DataMismatchError(DataParseError):
    """Image and label files disagree on the sample count."""
