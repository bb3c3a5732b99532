from enum import Enum
from pathlib import Path


class DPNASError(Exception):
    """Base class for errors that map onto a CLI exit code."""

    exit_code = 1


class ConfigError(DPNASError):
    exit_code = 2


class DatasetLoadError(DPNASError):
    """Raised when a dataset file does not match its documented byte layout."""

    exit_code = 3

    def __init__(self, path: Path, offset: int, reason: str):
        self.path = path
        self.offset = offset
        self.reason = reason
        super().__init__(f"{path}: {reason} (byte offset {offset})")


class InvalidReason(Enum):
    POOL_TOO_LARGE = "pool-too-large"
    ZERO_SPATIAL = "zero-spatial"
    FLAT_DIM_EXCEEDED = "flat-dim-exceeded"
    SKIP_AT_TAIL = "skip-at-tail"
    CONV_COUNT = "conv-count"


class ArchitectureError(DPNASError):
    exit_code = 4


class ArchitectureParseError(ArchitectureError):
    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class InvalidArchitectureError(ArchitectureError):
    def __init__(self, reason: InvalidReason, detail: str = ""):
        self.reason = reason
        message = reason.value if not detail else f"{reason.value}: {detail}"
        super().__init__(message)


class CheckpointError(DPNASError):
    exit_code = 5


class ContinualError(DPNASError):
    exit_code = 6
