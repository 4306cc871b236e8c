"""Exception hierarchy shared across the package."""


class SplatfillError(Exception):
    """Base class for all package errors."""


class ValidationError(SplatfillError):
    """Bad input: malformed files, violated invariants, bad configuration."""


class SceneError(ValidationError):
    """A scene directory or one of its views failed to load."""

    def __init__(self, message, view_id=None):
        if view_id is not None:
            message = f"view {view_id}: {message}"
        super().__init__(message)
        self.view_id = view_id


class ConfigError(ValidationError):
    pass


class NumericError(SplatfillError):
    """A computation produced non-finite values or a degenerate system."""
