"""Exception classes shared across the package."""


class VidcapError(Exception):
    """Base class; ``error_class`` is what the CLI prints on failure."""

    error_class = "VidcapError"


class ShapeError(VidcapError, ValueError):
    error_class = "ShapeError"


class ConfigError(VidcapError, ValueError):
    error_class = "ConfigError"


class NumericError(VidcapError, FloatingPointError):
    error_class = "NumericError"


class ContractError(VidcapError, RuntimeError):
    error_class = "ContractError"


class FormatError(VidcapError, ValueError):
    """Malformed on-disk artifact (video, checkpoint, corpus)."""

    error_class = "FormatError"

    def __init__(self, message, path=None, offset=None):
        if path is not None:
            message = f"{path}: {message}"
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.path = path
        self.offset = offset
