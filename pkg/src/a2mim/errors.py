"""Exception hierarchy shared by every module of the toolkit."""


class A2MIMError(Exception):
    pass


class ConfigError(A2MIMError, ValueError):
    """Invalid configuration value or missing required input.

    ``key`` names the offending config key when one is known, so the CLI can
    report it.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class GeometryError(A2MIMError, ValueError):
    """Shapes or resolutions that cannot be reconciled."""


class NumericError(A2MIMError, ArithmeticError):
    """Non-finite input, intermediate or loss."""


class EmptyDatasetError(ConfigError):
    pass


class ImageLoadError(A2MIMError, OSError):
    def __init__(self, paths):
        self.paths = list(paths)
        listing = "\n  ".join(str(p) for p in self.paths)
        super().__init__(f"could not decode {len(self.paths)} image(s):\n  {listing}")


class CheckpointError(A2MIMError):
    pass


class IntegrityError(CheckpointError):
    """Checksum mismatch or truncated checkpoint file."""


class IncompatibleCheckpointError(CheckpointError):
    """Format version or architecture does not match the reader."""
