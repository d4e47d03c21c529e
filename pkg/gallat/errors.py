"""Error types shared across the package."""
from typing import Optional, Sequence


class GallatError(Exception):
    """Base class for all errors raised by gallat."""
    kind = "error"
    exit_code = 1


class DimensionError(GallatError):
    """Raised when matrix shapes do not line up."""
    kind = "dimension"
    exit_code = 6

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join("x".join(str(d) for d in s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class ContractError(GallatError):
    """Raised when a caller violates a documented precondition."""
    kind = "contract"
    exit_code = 6


class InsufficientHistoryError(GallatError):
    """Raised when a target slot lacks the history its channels or baseline need."""
    kind = "insufficient_history"
    exit_code = 4


class DataFormatError(GallatError):
    """Raised for malformed input files; carries the 1-based row number when known."""
    kind = "data_format"
    exit_code = 5

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(GallatError):
    """Raised for unknown keys or unparsable values in configuration files."""
    kind = "config"
    exit_code = 2
