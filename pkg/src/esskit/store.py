"""The append-only event store.

Streams are numbered 1..n with no gaps. ``append`` is the only everyday
write and is arbitrated by the caller-supplied expected next sequence.
``insert_at``/``update_at``/``delete_at`` exist for in-place migrations and
are gated by the store's immutability degree.
"""

from __future__ import annotations

import enum
import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .errors import (
    ConcurrencyConflict,
    DuplicateStream,
    ImmutabilityViolation,
    PositionOutOfRange,
    UnknownStream,
)
from .events import Event, SequencedEvent, check_name
from .records import encode_entries, scan_log


class Degree(str, enum.Enum):
    STRICT = "strict"
    CUT_OFF = "cut_off"
    MUTABLE = "mutable"

    @classmethod
    def parse(cls, text: str) -> Degree:
        return cls(text.replace("-", "_"))


@dataclass(frozen=True)
class ImmutabilityPolicy:
    degree: Degree = Degree.STRICT
    backup_required_on_mutation: bool = False
    # lets a strict store move old events to cold storage; every archive
    # operation is still journaled
    archive_exempt: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "degree", Degree(self.degree))
        if self.degree is Degree.CUT_OFF:
            object.__setattr__(self, "backup_required_on_mutation", True)

    def to_json(self) -> dict:
        return {"degree": self.degree.value,
                "backup_required_on_mutation": self.backup_required_on_mutation,
                "archive_exempt": self.archive_exempt}

    @classmethod
    def from_json(cls, obj: dict) -> ImmutabilityPolicy:
        return cls(Degree(obj["degree"]), bool(obj.get("backup_required_on_mutation", False)),
                   bool(obj.get("archive_exempt", False)))


@dataclass(frozen=True)
class MutationRecord:
    stream_id: str
    kind: str  # insert | update | delete | archive
    position: int
    backup_id: str | None = None

    def to_json(self) -> dict:
        return {"stream": self.stream_id, "kind": self.kind,
                "position": self.position, "backup": self.backup_id}

    @classmethod
    def from_json(cls, obj: dict) -> MutationRecord:
        return cls(obj["stream"], obj["kind"], obj["position"], obj.get("backup"))


@dataclass(frozen=True)
class Backup:
    backup_id: str
    stream_id: str
    data: bytes

    def entries(self) -> list[SequencedEvent]:
        entries, err, _ = scan_log(self.data)
        if err is not None:
            raise err
        return entries


@dataclass(frozen=True)
class EventStream:
    """Immutable snapshot of one stream.

    ``archived_before`` is the truncation marker left by cold archiving:
    live entries start at that sequence and everything below it lives in the
    files named by ``archives``.
    """

    stream_id: str
    entries: tuple[SequencedEvent, ...] = ()
    stream_type: str | None = None
    archived_before: int = 1
    archives: tuple[str, ...] = ()

    @property
    def length(self) -> int:
        return self.archived_before - 1 + len(self.entries)

    @property
    def next_sequence(self) -> int:
        return self.length + 1

    def events(self) -> list[Event]:
        return [e.event for e in self.entries]


def sequence_problem(entries: Sequence[SequencedEvent], start: int = 1) -> str | None:
    """Return a description of the first gap/duplicate, or None if entries are start..n."""
    for i, entry in enumerate(entries):
        want = start + i
        if entry.sequence != want:
            if entry.sequence < want:
                return f"duplicate sequence {entry.sequence} at position {want}"
            return f"gap at {want}"
    return None


def backup_id_for(stream_id: str, data: bytes) -> str:
    return hashlib.sha256(stream_id.encode("utf-8") + b"\n" + data).hexdigest()


class StoreBackend:
    """Write-through hooks. The in-memory store uses this no-op base.

    Every hook runs before the in-memory state changes, so a hook that raises
    leaves the store untouched.
    """

    def stream_created(self, store: EventStore, stream: EventStream) -> None:
        pass

    def appended(self, store: EventStore, stream_id: str, entries: list[SequencedEvent]) -> None:
        pass

    def rewritten(self, store: EventStore, stream_id: str, entries: list[SequencedEvent]) -> None:
        pass

    def journaled(self, store: EventStore, record: MutationRecord) -> None:
        pass

    def backup_saved(self, store: EventStore, backup: Backup) -> None:
        pass

    def meta_changed(self, store: EventStore) -> None:
        pass

    def close(self) -> None:
        pass


class _StreamState:
    __slots__ = ("stream_id", "entries", "stream_type", "archived_before", "archives", "lock")

    def __init__(self, stream_id: str, stream_type: str | None = None) -> None:
        self.stream_id = stream_id
        self.entries: list[SequencedEvent] = []
        self.stream_type = stream_type
        self.archived_before = 1
        self.archives: list[str] = []
        self.lock = threading.RLock()

    @property
    def length(self) -> int:
        return self.archived_before - 1 + len(self.entries)

    def snapshot(self) -> EventStream:
        return EventStream(self.stream_id, tuple(self.entries), self.stream_type,
                           self.archived_before, tuple(self.archives))


MutationListener = Callable[[MutationRecord], None]
AppendListener = Callable[[str, list[SequencedEvent]], None]


class EventStore:
    """A set of disjoint, named event streams."""

    def __init__(self, store_id: str, policy: ImmutabilityPolicy | None = None, *,
                 bound_schema=None, backend: StoreBackend | None = None,
                 archive_dir: str | Path | None = None) -> None:
        self.store_id = check_name(store_id, "store id")
        self.policy = policy or ImmutabilityPolicy()
        self.bound_schema = bound_schema
        self.backend = backend or StoreBackend()
        self.archive_dir = Path(archive_dir) if archive_dir is not None else None
        self._streams: dict[str, _StreamState] = {}
        self._lock = threading.Lock()
        self._journal: list[MutationRecord] = []
        self._backups: dict[str, Backup] = {}
        self._mutation_listeners: list[MutationListener] = []
        self._append_listeners: list[AppendListener] = []

    def __repr__(self) -> str:
        return f"EventStore({self.store_id!r}, {self.policy.degree.value}, streams={len(self._streams)})"

    # -- listeners -----------------------------------------------------------

    def add_mutation_listener(self, fn: MutationListener) -> None:
        self._mutation_listeners.append(fn)

    def add_append_listener(self, fn: AppendListener) -> None:
        self._append_listeners.append(fn)

    # -- streams ---------------------------------------------------------------

    def _state(self, stream_id: str) -> _StreamState:
        try:
            return self._streams[stream_id]
        except KeyError:
            raise UnknownStream(stream_id) from None

    def __contains__(self, stream_id: str) -> bool:
        return stream_id in self._streams

    def stream_ids(self) -> list[str]:
        return sorted(self._streams)

    def stream(self, stream_id: str) -> EventStream:
        return self._state(stream_id).snapshot()

    @property
    def streams(self) -> dict[str, EventStream]:
        return {sid: self._streams[sid].snapshot() for sid in self.stream_ids()}

    def create_stream(self, stream_id: str, stream_type: str | None = None) -> EventStream:
        check_name(stream_id, "stream id")
        with self._lock:
            if stream_id in self._streams:
                raise DuplicateStream(stream_id)
            state = _StreamState(stream_id, stream_type)
            self.backend.stream_created(self, state.snapshot())
            self._streams[stream_id] = state
        return state.snapshot()

    def assign_stream_type(self, stream_id: str, stream_type: str | None) -> None:
        state = self._state(stream_id)
        with state.lock:
            old = state.stream_type
            state.stream_type = stream_type
            try:
                self.backend.meta_changed(self)
            except BaseException:
                state.stream_type = old
                raise

    def stream_type(self, stream_id: str) -> str | None:
        return self._state(stream_id).stream_type

    def archived_before(self, stream_id: str) -> int:
        return self._state(stream_id).archived_before

    def next_sequence(self, stream_id: str) -> int:
        return self._state(stream_id).length + 1

    @contextmanager
    def locked(self, stream_ids: Iterable[str]) -> Iterator[None]:
        """Hold the per-stream locks (sorted order) for exclusive access."""
        states = [self._state(sid) for sid in sorted(set(stream_ids))]
        for st in states:
            st.lock.acquire()
        try:
            yield
        finally:
            for st in reversed(states):
                st.lock.release()

    # -- read / append ---------------------------------------------------------

    def read(self, stream_id: str, from_sequence: int = 1) -> list[SequencedEvent]:
        if from_sequence < 1:
            raise ValueError("from_sequence must be >= 1")
        state = self._state(stream_id)
        entries = state.entries  # mutations swap the list, so this is a stable snapshot
        start = max(0, from_sequence - state.archived_before)
        return entries[start:]

    def append(self, stream_id: str, expected_sequence: int, events: Sequence[Event]) -> list[SequencedEvent]:
        """Append ``events`` atomically, numbered from ``expected_sequence``.

        ``expected_sequence`` must equal the stream's length + 1; anything
        else raises ConcurrencyConflict and leaves the stream unchanged.
        """
        if not events:
            raise ValueError("append needs at least one event")
        for ev in events:
            if not isinstance(ev, Event):
                raise TypeError(f"expected Event, got {type(ev).__name__}")
        state = self._state(stream_id)
        with state.lock:
            nxt = state.length + 1
            if expected_sequence != nxt:
                raise ConcurrencyConflict(stream_id, nxt, expected_sequence)
            new = [SequencedEvent(ev, nxt + i) for i, ev in enumerate(events)]
            self.backend.appended(self, stream_id, new)
            state.entries.extend(new)
            for fn in self._append_listeners:
                fn(stream_id, new)
        return new

    # -- backups ---------------------------------------------------------------

    @property
    def backups(self) -> dict[str, Backup]:
        return dict(self._backups)

    def stream_bytes(self, stream_id: str) -> bytes:
        return encode_entries(self._state(stream_id).entries)

    def content_hash(self) -> str:
        """Hash over every stream's bytes, type tag and archive marker."""
        h = hashlib.sha256()
        for sid in self.stream_ids():
            st = self._streams[sid]
            h.update(f"{sid}\0{st.stream_type}\0{st.archived_before}\0".encode())
            h.update(encode_entries(st.entries))
            h.update(b"\0")
        return h.hexdigest()

    def backup_stream(self, stream_id: str) -> str:
        """Record a whole-stream backup and return its content-hash id."""
        state = self._state(stream_id)
        with state.lock:
            data = encode_entries(state.entries)
            bid = backup_id_for(stream_id, data)
            if bid not in self._backups:
                backup = Backup(bid, stream_id, data)
                self.backend.backup_saved(self, backup)
                self._backups[bid] = backup
        return bid

    def restore_backup(self, backup_id: str) -> list[SequencedEvent]:
        try:
            return self._backups[backup_id].entries()
        except KeyError:
            raise KeyError(f"unknown backup: {backup_id}") from None

    # -- mutation ----------------------------------------------------------------

    @property
    def journal(self) -> list[MutationRecord]:
        return list(self._journal)

    def _check_mutation(self, stream_id: str, backup_id: str | None, what: str) -> None:
        policy = self.policy
        if policy.degree is Degree.STRICT:
            raise ImmutabilityViolation(
                f"immutability policy 'strict' forbids {what} on stream {stream_id}")
        if policy.backup_required_on_mutation:
            if backup_id is None:
                raise ImmutabilityViolation(
                    f"immutability policy '{policy.degree.value}' requires a backup before {what}")
            backup = self._backups.get(backup_id)
            if backup is None or backup.stream_id != stream_id:
                raise ImmutabilityViolation(
                    f"backup {backup_id} is not a recorded backup of stream {stream_id}")

    def _journal_append(self, record: MutationRecord) -> None:
        self.backend.journaled(self, record)
        self._journal.append(record)
        for fn in self._mutation_listeners:
            fn(record)

    def _rewrite(self, state: _StreamState, entries: list[SequencedEvent],
                 record: MutationRecord) -> EventStream:
        self.backend.rewritten(self, state.stream_id, entries)
        state.entries = entries
        self._journal_append(record)
        return state.snapshot()

    def _position(self, state: _StreamState, position: int, allow_end: bool) -> int:
        hi = state.length + (1 if allow_end else 0)
        if not isinstance(position, int) or not state.archived_before <= position <= hi:
            raise PositionOutOfRange(
                f"position {position} outside {state.archived_before}..{hi} of stream {state.stream_id}")
        return position - state.archived_before

    def insert_at(self, stream_id: str, position: int, event: Event, *,
                  backup_id: str | None = None) -> EventStream:
        state = self._state(stream_id)
        with state.lock:
            self._check_mutation(stream_id, backup_id, "insert")
            idx = self._position(state, position, allow_end=True)
            old = state.entries
            new = old[:idx] + [SequencedEvent(event, position)]
            new += [SequencedEvent(e.event, e.sequence + 1) for e in old[idx:]]
            return self._rewrite(state, new, MutationRecord(stream_id, "insert", position, backup_id))

    def update_at(self, stream_id: str, position: int, event: Event, *,
                  backup_id: str | None = None) -> EventStream:
        state = self._state(stream_id)
        with state.lock:
            self._check_mutation(stream_id, backup_id, "update")
            idx = self._position(state, position, allow_end=False)
            new = list(state.entries)
            new[idx] = SequencedEvent(event, position)
            return self._rewrite(state, new, MutationRecord(stream_id, "update", position, backup_id))

    def delete_at(self, stream_id: str, position: int, *,
                  backup_id: str | None = None) -> EventStream:
        state = self._state(stream_id)
        with state.lock:
            self._check_mutation(stream_id, backup_id, "delete")
            idx = self._position(state, position, allow_end=False)
            old = state.entries
            new = old[:idx] + [SequencedEvent(e.event, e.sequence - 1) for e in old[idx + 1:]]
            return self._rewrite(state, new, MutationRecord(stream_id, "delete", position, backup_id))

    def _restore_entries(self, stream_id: str, entries: list[SequencedEvent]) -> None:
        """Put a stream back to a previous content after a failed migration step."""
        state = self._state(stream_id)
        with state.lock:
            self.backend.rewritten(self, stream_id, list(entries))
            state.entries = list(entries)

    # -- cold storage ------------------------------------------------------------

    def archive(self, stream_id: str, before_sequence: int,
                directory: str | Path | None = None) -> Path:
        """Move entries with sequence < ``before_sequence`` to an archive file.

        The live stream keeps a truncation marker; sequences are unchanged so
        existing checkpoints stay meaningful.
        """
        state = self._state(stream_id)
        target_dir = Path(directory) if directory is not None else self.archive_dir
        if target_dir is None:
            raise ValueError("store has no archive directory; pass one explicitly")
        with state.lock:
            if self.policy.degree is Degree.STRICT and not self.policy.archive_exempt:
                raise ImmutabilityViolation(
                    "immutability policy 'strict' forbids archiving without an archival exemption")
            lo = state.archived_before
            if not isinstance(before_sequence, int) or not lo < before_sequence <= state.length + 1:
                raise PositionOutOfRange(
                    f"before_sequence {before_sequence} outside {lo + 1}..{state.length + 1}")
            cut = before_sequence - lo
            moved, kept = state.entries[:cut], state.entries[cut:]
            target_dir.mkdir(parents=True, exist_ok=True)
            name = f"{stream_id}.{lo}-{before_sequence - 1}.log"
            path = target_dir / name
            if path.exists():
                raise FileExistsError(path)
            path.write_bytes(encode_entries(moved))
            old = (state.archived_before, list(state.archives))
            state.archived_before = before_sequence
            state.archives.append(name)
            try:
                self.backend.meta_changed(self)
            except BaseException:
                state.archived_before, state.archives = old
                raise
            self.backend.rewritten(self, stream_id, kept)
            state.entries = kept
            self._journal_append(MutationRecord(stream_id, "archive", before_sequence, name))
            return path

    def archive_path(self, name: str) -> Path:
        if self.archive_dir is None:
            raise ValueError("store has no archive directory")
        return self.archive_dir / name

    def read_stitched(self, stream_id: str, from_sequence: int = 1,
                      directory: str | Path | None = None) -> list[SequencedEvent]:
        """Full history: archived segments followed by the live entries."""
        state = self._state(stream_id)
        base = Path(directory) if directory is not None else self.archive_dir
        out: list[SequencedEvent] = []
        for name in list(state.archives):
            if base is None:
                raise ValueError("store has no archive directory; pass one explicitly")
            entries, err, _ = scan_log((base / name).read_bytes())
            if err is not None:
                raise err
            out.extend(entries)
        out.extend(state.entries)
        return [e for e in out if e.sequence >= from_sequence]

    def close(self) -> None:
        self.backend.close()

    def __enter__(self) -> EventStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


__all__ = [
    "Backup",
    "Degree",
    "EventStore",
    "EventStream",
    "ImmutabilityPolicy",
    "MutationRecord",
    "StoreBackend",
    "sequence_problem",
]
