"""Exception types shared across the package."""

from __future__ import annotations


class DeltaStateError(Exception):
    """Base class for every error raised by this package."""


class StoreError(DeltaStateError):
    """Internal block-store misuse (dangling map, double drop, bad refcount)."""


class NotFound(DeltaStateError):
    """Path does not exist in the merged view (absent or whiteout-masked)."""


class IsDirectory(DeltaStateError):
    """A file operation was attempted on a directory path."""


class AlreadyExists(DeltaStateError):
    """mkdir target position is already occupied by a file."""


class UnknownLayer(DeltaStateError):
    """restore_switch named a layer id that is no longer registered."""


class StaleAfterRestore(DeltaStateError):
    """A cached handle's path no longer exists after a layer switch."""


class QuiesceViolation(DeltaStateError):
    """Dump or template capture attempted on a running address space."""


class DumpFailure(DeltaStateError):
    """Injected incremental-dump fault; raised before any engine mutation."""


class TemplateMiss(DeltaStateError):
    """Fast restore requested for a snapshot with no pooled template."""


class UnknownImage(DeltaStateError):
    """A dump-chain walk referenced a dropped or never-registered image."""


class DeliverToWrongEpoch(DeltaStateError):
    """Buffered I/O completion delivered to a space that never submitted it."""


class UnknownSnapshotId(DeltaStateError):
    """Restore target was never registered or has been pruned."""


class LightweightUnsound(DeltaStateError):
    """A lightweight checkpoint was requested over a non-empty delta.

    Carries the offending classifier pattern so misclassification is
    attributable.
    """

    def __init__(self, message: str, pattern: str | None = None):
        super().__init__(message)
        self.pattern = pattern


class TraceError(DeltaStateError):
    """Malformed trace input; carries the 1-based line number."""

    def __init__(self, message: str, lineno: int | None = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class IntegrityError(DeltaStateError):
    """A consistency scan found refcount or digest violations."""
