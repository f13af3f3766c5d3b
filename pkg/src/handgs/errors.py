"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class HandGSError(Exception):
    exit_code = 1


class ConfigError(HandGSError):
    exit_code = 2


class DatasetError(HandGSError):
    """Malformed dataset. ``code`` is a stable machine-readable tag."""

    exit_code = 3

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class NumericError(HandGSError):
    exit_code = 4


class DimensionError(HandGSError, ValueError):
    exit_code = 4


class DomainError(HandGSError, ValueError):
    exit_code = 4


class DegenerateTriangleError(NumericError, ValueError):
    pass


class RenderError(NumericError):
    def __init__(self, message: str, splat_index: int | None = None):
        super().__init__(message)
        self.splat_index = splat_index


class CheckpointError(HandGSError):
    exit_code = 5
