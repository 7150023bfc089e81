"""
Exception hierarchy shared across the pipeline.

Every error carries the CLI exit code of its family:
1 usage, 2 data, 3 model/checkpoint, 4 remote.
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MODEL = 3
EXIT_REMOTE = 4


class EvidenceMapError(Exception):
    """Base class for all errors raised by evidencemap."""

    exit_code = EXIT_MODEL


# -------------------- Usage --------------------
class UsageError(EvidenceMapError):
    exit_code = EXIT_USAGE


class UnknownFlagError(UsageError):
    pass


class ConfigError(UsageError):
    pass


# -------------------- Data --------------------
class DataError(EvidenceMapError):
    exit_code = EXIT_DATA


class ValidationError(DataError):
    """A record violates one of its invariants."""

    def __init__(self, message: str, field: str = "", record_id: Optional[str] = None):
        self.message = message
        self.field = field
        self.record_id = record_id
        detail = message
        if field:
            detail = f"{detail} (field: {field})"
        if record_id:
            detail = f"{detail} [record {record_id}]"
        super().__init__(detail)

    def with_record(self, record_id: str) -> "ValidationError":
        return ValidationError(self.message, self.field, record_id)


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None, path: str = ""):
        self.line = line
        self.path = path
        where = path or "<input>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


class CacheError(DataError):
    pass


class PreconditionError(DataError, ValueError):
    pass


# -------------------- Model / checkpoint --------------------
class ModelError(EvidenceMapError):
    exit_code = EXIT_MODEL


class TokenizationError(ModelError):
    pass


class IdOutOfRange(ModelError, IndexError):
    pass


class DimensionMismatch(ModelError, ValueError):
    pass


class IndexOutOfRange(ModelError, IndexError):
    pass


class NonFiniteValue(ModelError):
    pass


class NonFiniteLoss(ModelError):
    def __init__(self, record_id: str, value: float):
        self.record_id = record_id
        self.value = value
        super().__init__(f"non-finite loss {value!r} on record {record_id}")


class CheckpointError(ModelError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class CorruptArchive(CheckpointError):
    pass


# -------------------- Remote --------------------
class RemoteError(EvidenceMapError):
    exit_code = EXIT_REMOTE


class JudgeParseError(RemoteError):
    """The judge produced no usable verdict after the formatting retry."""

    def __init__(self, message: str, raw_replies: tuple = ()):
        self.raw_replies = tuple(raw_replies)
        super().__init__(message)
