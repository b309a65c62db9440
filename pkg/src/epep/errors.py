"""Exception hierarchy shared across the package."""


class EpepError(Exception):
    """Base class for all package errors."""


class DomainError(EpepError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ShapeError(EpepError, ValueError):
    """Array dimensions are inconsistent."""


class ConfigError(EpepError, ValueError):
    """Invalid configuration value."""


class PatternError(EpepError, ValueError):
    """Missing-modality pattern refers to a modality that does not exist."""


class ProtocolError(EpepError, ValueError):
    """Missing-modality protocol cannot be realised, or a sample violates it."""


class MetricError(EpepError, ValueError):
    """Metric is undefined for the given inputs."""


class TrainingError(EpepError, RuntimeError):
    """Training diverged or produced non-finite values."""


class FormatError(EpepError, ValueError):
    """Checkpoint or dataset file has the wrong format or version."""
