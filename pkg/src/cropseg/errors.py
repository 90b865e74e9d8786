"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data/format problems exit 2, failed verification checks exit 3.
"""


class CropsegError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CropsegError):
    """Array shapes disagree; the message names the offending axis."""


class ConfigError(CropsegError):
    """Invalid architecture, fold, or run configuration."""


class StateError(CropsegError):
    """Operation called out of order, e.g. backward before forward."""


class FormatError(CropsegError):
    """An on-disk artifact (weights, manifest, raster) is malformed."""


class DataError(CropsegError):
    """Input data violates a documented contract (bad class index, bad range)."""


class EmptyBatchError(DataError):
    """A loss was evaluated on a batch with no valid examples."""


class MetricError(DataError):
    """A metric is undefined on the given confusion matrix."""
