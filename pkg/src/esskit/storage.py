"""On-disk store layout.

::

    <root>/store.meta            manifest, one JSON line, format version 1
    <root>/schema.jsonl          bound StoreSchema document (optional)
    <root>/streams/<id>.log      one append-only record log per stream
    <root>/journal.log           mutation records
    <root>/backups/<id>.<hash>.log
    <root>/archive/<id>.<first>-<last>.log

Appends are written, flushed and (by default) fsynced before ``append``
returns. Rewrites after mutation go through a temp file and ``os.replace``.
"""

from __future__ import annotations

import fcntl
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from .errors import MalformedRecord, StoreCorrupt, UnknownFormatVersion
from .events import SequencedEvent, check_name
from .records import FORMAT_VERSION, dumps, encode_entries, loads, scan_log, split_lines
from .store import (
    Backup,
    EventStore,
    EventStream,
    ImmutabilityPolicy,
    MutationRecord,
    StoreBackend,
    _StreamState,
    sequence_problem,
)

MANIFEST = "store.meta"
SCHEMA_FILE = "schema.jsonl"
JOURNAL = "journal.log"
LOCK_FILE = ".lock"


def _atomic_write(path: Path, data: bytes, fsync: bool = True) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        if fsync:
            os.fsync(fh.fileno())
    os.replace(tmp, path)


class DiskBackend(StoreBackend):
    def __init__(self, root: str | Path, fsync: bool = True) -> None:
        self.root = Path(root)
        self.fsync = fsync
        self._handles: dict[str, object] = {}

    def log_path(self, stream_id: str) -> Path:
        return self.root / "streams" / f"{stream_id}.log"

    def _handle(self, stream_id: str):
        fh = self._handles.get(stream_id)
        if fh is None:
            fh = open(self.log_path(stream_id), "ab")
            self._handles[stream_id] = fh
        return fh

    def _sync(self, fh) -> None:
        fh.flush()
        if self.fsync:
            os.fsync(fh.fileno())

    def stream_created(self, store: EventStore, stream: EventStream) -> None:
        self.log_path(stream.stream_id).touch()
        write_manifest(self.root, store, extra=stream)

    def appended(self, store: EventStore, stream_id: str, entries: list[SequencedEvent]) -> None:
        fh = self._handle(stream_id)
        size = fh.tell()
        try:
            fh.write(encode_entries(entries))
            self._sync(fh)
        except BaseException:
            # leave no partial batch behind
            fh.close()
            self._handles.pop(stream_id, None)
            os.truncate(self.log_path(stream_id), size)
            raise

    def rewritten(self, store: EventStore, stream_id: str, entries: list[SequencedEvent]) -> None:
        fh = self._handles.pop(stream_id, None)
        if fh is not None:
            fh.close()
        _atomic_write(self.log_path(stream_id), encode_entries(entries), self.fsync)

    def journaled(self, store: EventStore, record: MutationRecord) -> None:
        with open(self.root / JOURNAL, "ab") as fh:
            fh.write((dumps(record.to_json()) + "\n").encode("utf-8"))
            self._sync(fh)

    def backup_saved(self, store: EventStore, backup: Backup) -> None:
        d = self.root / "backups"
        d.mkdir(exist_ok=True)
        _atomic_write(d / f"{backup.stream_id}.{backup.backup_id}.log", backup.data, self.fsync)

    def meta_changed(self, store: EventStore) -> None:
        write_manifest(self.root, store)

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles.clear()


def _stream_meta(st) -> dict:
    return {"type": st.stream_type, "archived_before": st.archived_before,
            "archives": list(st.archives)}


def write_manifest(root: Path, store: EventStore, extra: EventStream | None = None) -> None:
    streams = {sid: _stream_meta(store._streams[sid]) for sid in store.stream_ids()}
    if extra is not None:
        streams[extra.stream_id] = _stream_meta(extra)
    manifest = {
        "format": FORMAT_VERSION,
        "store_id": store.store_id,
        "policy": store.policy.to_json(),
        "schema": SCHEMA_FILE if store.bound_schema is not None else None,
        "streams": dict(sorted(streams.items())),
    }
    _atomic_write(root / MANIFEST, (dumps(manifest) + "\n").encode("utf-8"))


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    text = path.read_text(encoding="utf-8")
    try:
        manifest = loads(text)
    except ValueError as exc:
        raise StoreCorrupt(f"unreadable manifest {path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise StoreCorrupt(f"unreadable manifest {path}")
    if manifest.get("format") != FORMAT_VERSION:
        raise UnknownFormatVersion(f"unsupported store format version: {manifest.get('format')!r}")
    return manifest


def init_store(root: str | Path, store_id: str | None = None,
               policy: ImmutabilityPolicy | None = None, schema=None,
               *, fsync: bool = True) -> EventStore:
    """Create an empty store directory and return it opened."""
    root = Path(root)
    if (root / MANIFEST).exists():
        raise FileExistsError(f"store already exists at {root}")
    store_id = check_name(store_id or root.name, "store id")
    for sub in ("streams", "backups", "archive"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    store = EventStore(store_id, policy, bound_schema=schema)
    if schema is not None:
        from .schema import dump_store_schema

        (root / SCHEMA_FILE).write_text(dump_store_schema(schema), encoding="utf-8")
    write_manifest(root, store)
    return open_store(root, fsync=fsync)


def _load_lines(path: Path, repair: bool, what: str, stream_id: str | None = None):
    data = path.read_bytes()
    entries, err, good = scan_log(data)
    if err is not None:
        torn = not data.endswith(b"\n") and err.offset == data.rfind(b"\n") + 1
        if repair and torn:
            os.truncate(path, good)
        else:
            raise StoreCorrupt(f"{what}: {err}", stream_id, err.line) from None
    return entries


def open_store(root: str | Path, *, repair: bool = False, fsync: bool = True) -> EventStore:
    """Open a store directory, verifying every stream's sequence numbering.

    A torn final line (a write cut short by a crash) raises StoreCorrupt
    naming the line, unless ``repair`` is set, in which case that incomplete
    tail is truncated away and the complete prefix is kept.
    """
    root = Path(root)
    manifest = read_manifest(root)
    schema = None
    if manifest.get("schema"):
        from .schema import load_store_schema

        schema = load_store_schema((root / manifest["schema"]).read_text(encoding="utf-8"))
    store = EventStore(manifest["store_id"], ImmutabilityPolicy.from_json(manifest["policy"]),
                       bound_schema=schema, archive_dir=root / "archive")
    metas: dict = dict(manifest.get("streams") or {})
    logs_dir = root / "streams"
    logs_dir.mkdir(exist_ok=True)
    for path in sorted(logs_dir.glob("*.log")):
        metas.setdefault(path.stem, {"type": None, "archived_before": 1, "archives": []})
    for sid in sorted(metas):
        meta = metas[sid]
        path = logs_dir / f"{sid}.log"
        if not path.exists():
            raise StoreCorrupt(f"stream {sid}: log file missing", sid)
        entries = _load_lines(path, repair, f"stream {sid}", sid)
        base = int(meta.get("archived_before", 1))
        # a crash between archiving and the log rewrite leaves archived lines behind
        entries = [e for e in entries if e.sequence >= base]
        problem = sequence_problem(entries, base)
        if problem is not None:
            pos = next(base + i for i, e in enumerate(entries) if e.sequence != base + i)
            raise StoreCorrupt(f"stream {sid}: {problem}", sid, pos)
        state = _StreamState(sid, meta.get("type"))
        state.entries = entries
        state.archived_before = base
        state.archives = list(meta.get("archives", []))
        store._streams[sid] = state
    journal = root / JOURNAL
    if journal.exists():
        data = journal.read_bytes()
        for line_no, offset, line in split_lines(data):
            if not line.endswith(b"\n"):
                if repair:
                    os.truncate(journal, offset)
                    break
                raise StoreCorrupt(f"journal: {MalformedRecord('torn write', line_no, offset)}")
            try:
                store._journal.append(MutationRecord.from_json(loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise StoreCorrupt(f"journal line {line_no}: {exc}") from None
    backups = root / "backups"
    if backups.exists():
        for path in sorted(backups.glob("*.log")):
            sid, _, bid = path.stem.rpartition(".")
            store._backups[bid] = Backup(bid, sid, path.read_bytes())
    store.backend = DiskBackend(root, fsync=fsync)
    return store


def store_size(root: str | Path) -> int:
    return sum(p.stat().st_size for p in Path(root).rglob("*") if p.is_file() and p.name != LOCK_FILE)


@contextmanager
def store_lock(root: str | Path) -> Iterator[None]:
    """Exclusive advisory lock on the store directory."""
    with open(Path(root) / LOCK_FILE, "a") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
