class GenvoxError(Exception):
    """Base class for package errors."""


class ConfigError(GenvoxError, ValueError):
    """Invalid configuration or shape mismatch against a declared signature."""


class MissingGradientError(GenvoxError, KeyError):
    pass


class GradientCheckError(GenvoxError):
    pass


class NonFiniteError(GenvoxError, FloatingPointError):
    pass


class CheckpointError(GenvoxError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError, ConfigError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError, ConfigError):
    pass


class TrailingDataError(CheckpointError):
    pass
