"""Exception hierarchy shared by every module."""


class StarpoError(Exception):
    """Base class for all package errors."""


class InstanceError(StarpoError):
    """Unknown or unloadable environment instance."""


class LifecycleError(StarpoError):
    """Environment used outside its episode lifecycle."""


class EncodingError(StarpoError):
    """Text or token ids that the vocabulary cannot represent."""


class ShapeError(StarpoError):
    """Misaligned arrays."""


class NumericError(StarpoError):
    """Non-finite value where a finite one is required."""


class GroupSizeError(StarpoError):
    """Group statistics requested on fewer than two samples."""


class SequencingError(StarpoError):
    """Records delivered out of step order."""


class GenerationError(StarpoError):
    """Procedural generation exhausted its retry budget."""


class ConfigError(StarpoError):
    """Invalid experiment configuration; message carries the field path."""


class CheckpointError(StarpoError):
    """Checkpoint missing, malformed, or of an unsupported version."""
