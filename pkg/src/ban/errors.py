"""Error taxonomy shared by every module in the package."""


class BanError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionError(BanError):
    """Shapes, extents, or indices do not line up."""


class GeometryError(BanError):
    """A box or an output extent is empty/degenerate."""


class ConfigError(BanError):
    """A configuration value is missing, unknown, or out of range."""


class CheckpointError(BanError):
    """A checkpoint file is malformed or does not match the model."""


class NumericError(BanError):
    """A forward/backward pass or a training run produced NaN or Inf."""
