"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ReinPoolError(Exception):
    exit_code = 1


class ConfigError(ReinPoolError):
    pass


class ValidationError(ReinPoolError):
    pass


class ShapeError(ValidationError):
    pass


class DimensionMismatchError(ShapeError):
    pass


class EmptyInputError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateEntryError(ValidationError):
    pass


class IncompatibleCheckpointError(ConfigError):
    pass


class NumericError(ReinPoolError):
    exit_code = 2


class StorageError(ReinPoolError):
    exit_code = 3


class CorruptStoreError(StorageError):
    pass


class ChecksumError(CorruptStoreError):
    pass
