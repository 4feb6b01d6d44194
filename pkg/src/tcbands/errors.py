"""Exception types raised across the package."""


class ParameterError(ValueError):
    """A model or numerical parameter is outside its admissible range."""


class GridMismatchError(ValueError):
    """Two series that must share a time grid (or path count) do not."""


class MeasureError(ValueError):
    """A path set was simulated under the wrong probability measure."""


class DegenerateMarketError(ValueError):
    """A local variance vanishes where a ratio of variances is required."""


class UnsupportedModelError(ValueError):
    """The requested operation has no implementation for this market type."""


class BracketError(RuntimeError):
    """A one-dimensional minimisation could not bracket its minimiser."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or fails validation."""
