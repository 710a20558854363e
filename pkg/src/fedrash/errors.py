"""Exception hierarchy shared across the package."""


class FedrashError(Exception):
    """Base class for all package errors."""


class DimensionError(FedrashError):
    """Shapes of model, features, or labels do not line up."""


class IngestionError(FedrashError):
    """CSV / schema ingestion failure, message carries row/column location."""


class PartitionError(FedrashError):
    """Client partitioning could not satisfy the minimum-size constraints."""


class ConvergenceError(FedrashError):
    """Iterative computation did not reach its tolerance within max_iters."""

    def __init__(self, message: str, lower: float, upper: float):
        super().__init__(message)
        self.lower = lower
        self.upper = upper


class UnsupportedMetricError(FedrashError):
    """Metric requested on a task shape it is not defined for."""


class ConfigError(FedrashError):
    """Experiment configuration is invalid; message names the field path."""


class StageError(FedrashError):
    """A pipeline stage failed; message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
