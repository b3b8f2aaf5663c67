"""Exception types. Everything a caller can trigger with bad data derives from
``DataError`` so the CLI can map it onto one exit code."""


class DataError(Exception):
    """Input data or a file violates a documented contract."""


class ShardFormatError(DataError):
    pass


class ShardCorruptionError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DimensionMismatchError(DataError):
    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)
        self.index = index


class DegenerateDataError(DataError):
    pass


class CheckpointError(DataError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the last good state."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ParseError(DataError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigError(DataError):
    pass
