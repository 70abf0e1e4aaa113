"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CdstlError(Exception):
    exit_code = 1


class ConfigError(CdstlError, ValueError):
    exit_code = 2


class DataError(CdstlError, ValueError):
    exit_code = 3


class DataFormatError(DataError):
    """Malformed on-disk data. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(DataFormatError):
    pass


class IntegrityError(DataError):
    """Upstream artifact hash does not match what a downstream artifact recorded."""


class StratificationError(DataError):
    pass


class DimensionError(CdstlError, ValueError):
    exit_code = 2


class UsageError(CdstlError, RuntimeError):
    exit_code = 1


class NumericError(CdstlError, ArithmeticError):
    exit_code = 4


class DegenerateError(NumericError):
    pass


class ArtifactIOError(CdstlError, OSError):
    exit_code = 5
