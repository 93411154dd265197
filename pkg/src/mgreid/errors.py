"""Exception taxonomy for the mgreid package."""


class MgreidError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MgreidError):
    """Invalid configuration value or inconsistent configuration combination."""


class InputError(MgreidError):
    """Runtime input violates a documented precondition (shape, range, dtype)."""


class NumericError(MgreidError):
    """Non-finite values or degenerate numerics encountered mid-computation."""


class LabelingError(MgreidError):
    """Pseudo-labeling produced an unusable result (e.g. no clusters at all)."""


class ValidationError(MgreidError):
    """A manifest or other structured input failed validation."""


class ParseError(ValidationError):
    """A structured text input could not be parsed; carries location context."""


class CheckpointError(MgreidError):
    """Checkpoint archive and manifest disagree with each other or the model."""


class GenerationError(MgreidError):
    """A SyntheticSpec describes a dataset that cannot be generated."""
