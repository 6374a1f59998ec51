"""Exception hierarchy.

Domain outcomes that callers are expected to branch on (a rejected command,
a failed conformance check) are values, not exceptions. Everything here is
either a caller error or an infrastructure fault.
"""

from __future__ import annotations


class EssError(Exception):
    """Base class for every error raised by esskit."""


# -- store ------------------------------------------------------------------


class DuplicateStream(EssError):
    def __init__(self, stream_id: str) -> None:
        super().__init__(f"stream already exists: {stream_id}")
        self.stream_id = stream_id


class UnknownStream(EssError):
    def __init__(self, stream_id: str) -> None:
        super().__init__(f"unknown stream: {stream_id}")
        self.stream_id = stream_id


class ConcurrencyConflict(EssError):
    """The caller's expected sequence is not the stream's next sequence.

    ``expected`` is what the store expected (length + 1); ``supplied`` is
    what the caller passed. The caller lost a race and must re-read.
    """

    def __init__(self, stream_id: str, expected: int, supplied: int) -> None:
        super().__init__(f"concurrency conflict: expected {expected}")
        self.stream_id = stream_id
        self.expected = expected
        self.supplied = supplied


class ImmutabilityViolation(EssError):
    pass


class PositionOutOfRange(EssError):
    pass


# -- schema / projections ---------------------------------------------------


class UnassignedStreamType(EssError):
    def __init__(self, stream_id: str) -> None:
        super().__init__(f"stream has no stream type: {stream_id}")
        self.stream_id = stream_id


class NonConformingEvent(EssError):
    pass


class UnknownCommandType(EssError):
    pass


class UnknownQuery(EssError):
    pass


class UnknownProjector(EssError):
    pass


class InvalidProjection(EssError):
    pass


class TargetedRebuildUnsupported(EssError):
    pass


# -- evolution --------------------------------------------------------------


class ToleranceExceeded(EssError):
    """A weak-schema read cannot absorb the difference; upcast instead."""


class MissingUpcaster(EssError):
    def __init__(self, event_type: str, from_version: int) -> None:
        super().__init__(f"no upcaster for {event_type} v{from_version}")
        self.event_type = event_type
        self.from_version = from_version


class TransformFailure(EssError):
    def __init__(self, message: str, report=None) -> None:
        super().__init__(message)
        self.report = report


# -- persistence ------------------------------------------------------------


class MalformedRecord(EssError):
    def __init__(self, reason: str, line: int, offset: int) -> None:
        super().__init__(f"malformed record at line {line} (byte {offset}): {reason}")
        self.reason = reason
        self.line = line
        self.offset = offset


class StoreCorrupt(EssError):
    def __init__(self, message: str, stream_id: str | None = None, position: int | None = None) -> None:
        super().__init__(message)
        self.stream_id = stream_id
        self.position = position


class UnknownFormatVersion(EssError):
    pass


# -- harness ----------------------------------------------------------------


class UnknownScriptTarget(EssError):
    pass
