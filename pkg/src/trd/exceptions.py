"""Exception hierarchy shared by every part of the package."""


class TRDError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TRDError, ValueError):
    """Invalid or unknown configuration."""


class DimensionError(TRDError, ValueError):
    """Tensor or map shapes do not satisfy a contract."""


class WeightLoadError(TRDError, OSError):
    """Pretrained backbone weights are missing or do not match the architecture."""


class CheckpointError(TRDError):
    """Checkpoint is unreadable or incompatible with the requested model."""


class CalibrationError(TRDError):
    """Calibration statistics cannot be computed or are missing."""


class MetricError(TRDError, ValueError):
    """Metric inputs are degenerate (e.g. a single class)."""


class IngestionError(TRDError, OSError):
    """A dataset file is missing or cannot be decoded."""


class DataError(TRDError, ValueError):
    """Data violates a split contract (e.g. anomalies in training data)."""


class TrainingError(TRDError, RuntimeError):
    """Training diverged or produced a non-finite loss."""


class EvaluationError(TRDError, RuntimeError):
    """Evaluation cannot run with the given checkpoint."""
