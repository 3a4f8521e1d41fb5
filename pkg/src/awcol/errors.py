"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions incompatible with an operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or diverged."""


class EpisodeError(ValueError):
    """An episode violates its structural invariants."""


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration."""


class DataFormatError(ValueError):
    """A data file failed to parse or validate."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
