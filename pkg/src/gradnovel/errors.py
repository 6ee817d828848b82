"""Exception types shared across the package."""


class GradNovelError(Exception):
    """Base class for all package errors."""


class ShapeError(GradNovelError, ValueError):
    """Tensor/layer dimension mismatch."""


class LayerStateError(GradNovelError, RuntimeError):
    """Backward called without a matching forward."""


class InputError(GradNovelError, ValueError):
    """Invalid argument value (bad level, empty dataset, ...)."""


class FormatError(GradNovelError, ValueError):
    """Malformed on-disk file (dataset, checkpoint, feature cache)."""


class ConfigError(GradNovelError, ValueError):
    """Invalid or unknown configuration key/value."""


class TrainingError(GradNovelError, RuntimeError):
    """Non-finite loss or other unrecoverable training failure."""
