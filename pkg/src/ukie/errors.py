"""Exception types shared across the toolkit."""


class UKIEError(Exception):
    """Base class for toolkit errors."""


class ConfigError(UKIEError, ValueError):
    """A configuration value is missing or invalid.

    ``field`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class IngestionError(UKIEError, OSError):
    """Dataset files could not be found or parsed."""


class NonFiniteLossError(UKIEError, FloatingPointError):
    """A training loss became NaN or infinite."""

    def __init__(self, message: str, snapshot: dict | None = None):
        self.snapshot = snapshot or {}
        super().__init__(message)


class ColdStartError(UKIEError, KeyError):
    """A semantic memory was queried for a class it has never seen."""


class MissingArtifactError(UKIEError, FileNotFoundError):
    """A checkpoint, report or other expected artifact is absent."""


class LayoutMismatchError(UKIEError, ValueError):
    """Tensors or checkpoints disagree with the latent layout."""
