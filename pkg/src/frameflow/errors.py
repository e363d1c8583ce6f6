"""Exception types shared across the package."""


class FrameflowError(Exception):
    """Base class for package errors."""


class ShapeError(FrameflowError, ValueError):
    """Tensor or field dimensions do not match the operation's contract."""


class TapeError(FrameflowError, RuntimeError):
    """Invalid use of the autodiff tape (detached tensor, repeated backward)."""


class GradCheckError(FrameflowError, RuntimeError):
    """Gradient check could not be evaluated (non-finite objective)."""


class StreamError(FrameflowError, ValueError):
    """Malformed frame stream: bad spacing, ordering, or empty input."""


class EmptyStreamError(StreamError):
    """Stream shorter than one second; nothing to align."""


class GroupingError(StreamError):
    """Egocentric encoder received a group that is not exactly 4 frames."""


class GenerationError(FrameflowError, ValueError):
    """Synthetic video/dataset generation got an infeasible request."""


class StrategyError(FrameflowError, ValueError):
    """Aggregation strategy and token modes are incompatible."""


class RoutingError(FrameflowError, ValueError):
    """Dropping-router mask does not match the sequence."""


class PolicyError(FrameflowError, ValueError):
    """Router placement policy invalid for the model depth."""


class ThresholdError(FrameflowError, ValueError):
    """Percentile threshold requested over an empty weight set."""


class CacheError(FrameflowError, RuntimeError):
    """Incremental-decoder cache does not extend the current episode."""


class SupervisionError(FrameflowError, ValueError):
    """Supervision flags do not align with sequence positions."""


class TemplateError(FrameflowError, ValueError):
    """Keyframe template assembly is missing grid or box inputs."""


class BoxError(FrameflowError, ValueError):
    """Malformed bounding box."""


class ConfigError(FrameflowError, ValueError):
    """Invalid or unknown configuration."""


class DataError(FrameflowError, ValueError):
    """Dataset or artifact files missing or inconsistent."""


class ParseError(DataError):
    """Malformed persisted file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MetricError(FrameflowError, ValueError):
    """Metric undefined for the given inputs (e.g. no supervised positions)."""


class NumericError(FrameflowError, RuntimeError):
    """Non-finite value where the training loop requires a finite one."""
