"""Shared exception types.

The CLI maps these onto exit codes: usage/config problems -> 1,
data and file-format problems -> 2, numerical failures -> 3.
"""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(ValueError):
    """Autodiff graph misuse (non-scalar loss, corrupted node)."""


class NumericalError(ArithmeticError):
    """A numeric result left its valid domain (non-finite, negative distance, ...)."""


class ConfigError(ValueError):
    """Bad run configuration: unknown key, wrong type, invalid value."""


class DataError(Exception):
    """Base for dataset / file-format problems."""


class DetectionParseError(DataError):
    """Malformed detection sidecar line."""


class DetectionValidationError(DataError):
    """Detection record violates an invariant (e.g. negative box extent)."""


class CropError(DataError):
    """Crop region does not intersect the image."""


class ShardFormatError(DataError):
    """Shard file has a bad magic or header."""


class ShardCorruptionError(DataError):
    """Shard file length disagrees with its header."""


class SnapshotFormatError(DataError):
    """Snapshot container has a bad magic, version, or length."""
