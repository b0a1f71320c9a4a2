"""densecount errors."""


class DensecountError(Exception):
    """Base class for all errors raised by densecount."""


class DimensionError(DensecountError, ValueError):
    """An error in the shape or number of dimensions of an array."""


class ConfigurationError(DensecountError, ValueError):
    """A setting, input size or option is invalid for the requested operation."""


class RegionError(DensecountError, IndexError):
    """A requested region lies outside the bounds of a density map."""


class NumericalError(DensecountError, FloatingPointError):
    """A non-finite value appeared in an operation on finite inputs."""


class TrainingError(DensecountError):
    """Training cannot continue, e.g. because of a non-finite loss or gradient.

    Parameters
    ----------
    message : str
    layer : str, optional
        Name of the layer holding the offending gradient.
    batch_ids : list of str, optional
        Sample ids of the offending batch.
    """

    def __init__(self, message, layer=None, batch_ids=None):
        super().__init__(message)
        self.layer = layer
        self.batch_ids = list(batch_ids) if batch_ids is not None else None


class CheckpointError(DensecountError):
    """A checkpoint file is corrupt or belongs to another architecture."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class AnnotationError(DensecountError, ValueError):
    """An annotation (point or box) is invalid."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class LoadError(DensecountError):
    """A dataset file is missing or malformed."""

    def __init__(self, message, path=None, line=None):
        if path is not None:
            location = str(path) if line is None else f"{path}:{line}"
            message = f"{location}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class GenerationError(DensecountError):
    """A synthetic scene cannot be generated with the requested settings."""


class ScoringError(DensecountError):
    """A difficulty oracle failed on a sample."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class DensecountWarning(UserWarning):
    """Warning for recoverable situations, e.g. a fallback kernel width."""
