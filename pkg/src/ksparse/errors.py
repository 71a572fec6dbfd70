"""Shared exception types.

Every failure surfaced to a caller goes through one of these so the CLI can
map them to structured diagnostics and a nonzero exit code.
"""


class KsparseError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(KsparseError):
    """An operation received tensors with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class DomainError(KsparseError):
    """A value fell outside an operation's mathematical domain (log of a
    non-positive number, zero-norm row, non-finite gradient, ...)."""


class ConfigError(KsparseError):
    """A configuration key, value, or bound is invalid."""


class FileFormatError(KsparseError):
    """A persisted file failed validation (magic, version, truncation)."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
