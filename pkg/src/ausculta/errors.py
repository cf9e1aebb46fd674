"""Package exception hierarchy."""


class AuscultaError(Exception):
    """Base class for package-specific failures."""


class WavDecodeError(AuscultaError):
    """Malformed or unsupported WAV input."""


class DataError(AuscultaError):
    """Invalid data contents: manifests, clip files, stores, shapes."""


class ConfigError(AuscultaError):
    """Inconsistent or unsupported configuration."""


class CheckpointError(AuscultaError):
    """Unreadable or corrupted checkpoint container."""


class TrainingError(AuscultaError):
    """Training aborted (e.g. non-finite loss)."""
