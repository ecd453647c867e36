"""Exception hierarchy shared across the package.

Everything raised on bad user input derives from :class:`MVSError`, which is
what the command-line front end maps to exit code 2.
"""


class MVSError(Exception):
    """Base class for user-facing errors (bad input, bad configuration)."""

    kind = "error"


class ConfigError(MVSError, ValueError):
    kind = "config"


class BehindCameraError(MVSError, ValueError):
    kind = "behind-camera"


class InvalidDepthError(MVSError, ValueError):
    kind = "invalid-depth"


class DimensionError(MVSError, ValueError):
    kind = "dimension"


class FormatError(MVSError, ValueError):
    """Malformed file content. ``offset`` is the byte offset of the problem, if known."""

    kind = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingComponentError(MVSError, FileNotFoundError):
    kind = "missing component"
