"""Exception hierarchy shared by every module."""


class HybridcastError(Exception):
    pass


class ConfigError(HybridcastError, ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DataValidationError(HybridcastError, ValueError):
    pass


class ParseError(DataValidationError):
    pass


class ShapeError(HybridcastError, ValueError):
    pass


class TrainingAborted(HybridcastError, RuntimeError):
    """Raised when a non-finite loss, gradient or update is detected."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
