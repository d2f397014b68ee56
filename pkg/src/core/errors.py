"""
Exception hierarchy for the Swin CT toolkit.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Dict, List, Optional


class SwinCTError(Exception):
    """Base class for all expected failures."""

    exit_code = 5


class UsageError(SwinCTError):
    """Bad invocation: wrong arguments, out-of-range steps, empty inputs."""

    exit_code = 2


class ConfigError(SwinCTError, ValueError):
    """Invalid configuration or hyperparameters."""

    exit_code = 2


class DataError(SwinCTError):
    """Dataset content violates a contract (labels, ratios, sizes)."""

    exit_code = 3


class FormatError(DataError):
    """Malformed binary file; `offset` is the byte position of the failure."""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = []
        if path:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class CheckpointError(DataError):
    """Checkpoint incompatible with the model; `diff` maps names to reasons."""

    def __init__(self, message: str, diff: Optional[Dict[str, str]] = None):
        self.diff = diff or {}
        lines = [message] + [f"  {name}: {reason}" for name, reason in sorted(self.diff.items())]
        super().__init__("\n".join(lines))


class NumericError(SwinCTError):
    """Non-finite loss or gradient during training."""

    exit_code = 4

    def __init__(self, message: str, parameter: Optional[str] = None, snapshot: Optional[str] = None):
        self.parameter = parameter
        self.snapshot = snapshot
        super().__init__(message)


class ShapeError(SwinCTError, ValueError):
    """Tensor shapes do not agree."""

    exit_code = 5

    def __init__(self, message: str, shapes: Optional[List[tuple]] = None):
        self.shapes = shapes or []
        if self.shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in self.shapes)
        super().__init__(message)
