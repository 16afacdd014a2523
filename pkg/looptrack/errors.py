"""
Exception types shared across looptrack.

Every error carries a human-readable `msg` (also passed to Exception) so the
entry point can print it without a stack trace. Usage errors map to exit
code 1, everything else to exit code 2.
"""
from typing import Any


class LoopTrackError(Exception):
    """Base class for expected, reportable failures."""

    def __init__(self, msg: str):
        self.msg = msg
        super().__init__(msg)


class UsageError(LoopTrackError):
    """Bad command line: unknown flag, missing file, invalid value."""


class ConfigFileError(LoopTrackError):
    """Malformed key=value config file."""

    def __init__(self, path: str, line_no: int, msg: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


class SequenceFormatError(LoopTrackError):
    """Sequence folder does not match the expected layout."""

    def __init__(self, path: str, msg: str, line_no: int | None = None):
        self.path = path
        self.line_no = line_no
        where = f"{path}:{line_no}" if line_no is not None else path
        super().__init__(f"{where}: {msg}")


class EmptyTargetError(LoopTrackError):
    """A mask with no foreground pixels was used as a target."""


class TrackingLostError(LoopTrackError):
    """Target left the frame or collapsed; `state` is the last good state."""

    def __init__(self, msg: str, state: Any = None):
        self.state = state
        super().__init__(msg)


class CycleDiscarded(LoopTrackError):
    """A training cycle drifted or lost the target and must be skipped."""

    def __init__(self, msg: str, reason: str = "drift"):
        self.reason = reason
        super().__init__(msg)


class NonFiniteLossError(LoopTrackError):
    """Training produced NaN/inf; `sample_id` names the offending cycle."""

    def __init__(self, msg: str, sample_id: str | None = None):
        self.sample_id = sample_id
        super().__init__(msg)


class CheckpointError(LoopTrackError):
    """Checkpoint missing, unreadable or of an unknown format/version."""
