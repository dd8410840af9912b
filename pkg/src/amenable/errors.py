"""Exception types raised across the package."""


class AmenableError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(AmenableError, ValueError):
    """A synthetic-data spec cannot be realised."""


class ManifestError(AmenableError, ValueError):
    """A dataset manifest is malformed or inconsistent."""


class CheckpointError(AmenableError, ValueError):
    """A checkpoint file is malformed or does not match the target network."""


class ConfigError(AmenableError, ValueError):
    """A run configuration failed validation."""


class MisuseError(AmenableError, TypeError):
    """An operation was called on an object of the wrong variant."""


class NonFiniteError(AmenableError, FloatingPointError):
    """A loss, gradient or advantage became NaN or infinite."""
