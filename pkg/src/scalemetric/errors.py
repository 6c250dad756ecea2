"""Exception types raised across the package."""


class ScaleMetricError(Exception):
    """Base class for all package errors."""


class ZeroVector(ScaleMetricError, ValueError):
    pass


class DimMismatch(ScaleMetricError, ValueError):
    pass


class InvalidConfig(ScaleMetricError, ValueError):
    pass


class OutOfBounds(ScaleMetricError, ValueError):
    pass


class SourceTooSmall(ScaleMetricError, ValueError):
    pass


class ImageTooSmall(ScaleMetricError, ValueError):
    pass


class DegenerateNorm(ScaleMetricError, ValueError):
    pass


class EmptyBatch(ScaleMetricError, ValueError):
    pass


class IndexOutOfRange(ScaleMetricError, IndexError):
    pass


class UninitializedSlot(ScaleMetricError, RuntimeError):
    pass


class QueryWithoutMatch(ScaleMetricError, ValueError):
    pass


class MalformedCsv(ScaleMetricError, ValueError):
    pass


class CheckpointMismatch(ScaleMetricError, ValueError):
    pass
