"""Schema evolution: versioned events, weak schema, upcasting, in-place
transformation, copy-and-transform, plus cold archiving.

Upcasters are single steps (``v -> v + 1``) composed into chains at read
time; stored bytes are never touched. Migration plans describe the same kind
of per-event change declaratively and compile to an upcaster chain, which
the two rewriting techniques then apply to stored streams.
"""

from __future__ import annotations

import copy
import enum
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

from .errors import (
    ImmutabilityViolation,
    MissingUpcaster,
    ToleranceExceeded,
    TransformFailure,
)
from .events import Event, SequencedEvent
from .records import dump_document, load_document, loads
from .schema import (
    EventSchema,
    StoreSchema,
    StreamSchema,
    conforms_event,
    conforms_store,
    load_store_schema,
    superset_gaps,
)
from .store import Degree, EventStore

# -- technique 1: versioned events -------------------------------------------------


@dataclass(frozen=True)
class Compatible:
    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class Incompatible:
    reason: str

    def __bool__(self) -> bool:
        return False


def check_versioned_events(old: StoreSchema, new: StoreSchema) -> Compatible | Incompatible:
    """Compatible iff every store conforming to ``old`` also conforms to ``new`` as is."""
    gaps = superset_gaps(old, new)
    if gaps:
        return Incompatible("not a superset: " + "; ".join(gaps))
    return Compatible()


# -- technique 2: weak schema -----------------------------------------------------


def weak_read(raw: bytes | str, schema: EventSchema) -> Event:
    """Tolerant read of a serialized event (log record or bare envelope).

    Undeclared fields are kept as they are and never checked, missing fields
    with defaults are filled in, and the event keeps its stored version. A
    missing required field without a default, or a declared field holding a
    value of the wrong kind, raises ToleranceExceeded.
    """
    try:
        obj = loads(raw)
    except ValueError as exc:
        raise ValueError(f"not an event envelope: {exc}") from None
    if not isinstance(obj, dict) or "type" not in obj or "payload" not in obj:
        raise ValueError("not an event envelope")
    if obj["type"] != schema.event_type:
        raise ToleranceExceeded(f"event type {obj['type']} cannot be read as {schema.event_type}")
    payload = dict(obj["payload"])
    for spec in schema.fields:
        if spec.name in payload:
            if not spec.accepts(payload[spec.name]):
                raise ToleranceExceeded(f"field {spec.name} is not a {spec.describe()}")
        elif spec.has_default:
            payload[spec.name] = copy.deepcopy(spec.default)
        elif spec.required:
            raise ToleranceExceeded(f"missing required field {spec.name} and no default")
    return Event(obj["type"], payload, obj.get("v", 1), obj.get("meta", {}))


# -- technique 3: upcasting --------------------------------------------------------


@dataclass(frozen=True)
class Upcaster:
    """Lifts one event type from ``from_version`` to ``from_version + 1``.

    ``transform`` returns the replacement events: none (drop), one, or many
    (split). Every output carries ``to_version``.
    """

    event_type: str
    from_version: int
    transform: Callable[[Event], list[Event]]

    @property
    def to_version(self) -> int:
        return self.from_version + 1


def _index(chain: Iterable[Upcaster]) -> dict[tuple[str, int], Upcaster]:
    index: dict[tuple[str, int], Upcaster] = {}
    for up in chain:
        key = (up.event_type, up.from_version)
        if key in index:
            raise ValueError(f"two upcasters for {up.event_type} v{up.from_version}")
        index[key] = up
    return index


def latest_versions(chain: Iterable[Upcaster]) -> dict[str, int]:
    out: dict[str, int] = {}
    for up in chain:
        out[up.event_type] = max(out.get(up.event_type, 0), up.to_version)
    return out


class Upcasting:
    """A compiled upcaster chain with its target version per event type."""

    def __init__(self, chain: Iterable[Upcaster], targets: dict[str, int] | None = None,
                 schema: StreamSchema | StoreSchema | None = None) -> None:
        chain = list(chain)
        self.index = _index(chain)
        self.targets = dict(targets) if targets is not None else latest_versions(chain)
        self.schema = schema

    def _target_schema(self, event_type: str, version: int) -> EventSchema | None:
        if isinstance(self.schema, StreamSchema):
            return self.schema.schema_for(event_type, version)
        if isinstance(self.schema, StoreSchema):
            for ss in self.schema.stream_schemas:
                es = ss.schema_for(event_type, version)
                if es is not None:
                    return es
        return None

    def event(self, event: Event) -> list[Event]:
        target = self.targets.get(event.event_type)
        if target is None or event.schema_version == target:
            return [event]
        if event.schema_version > target:
            raise ValueError(f"{event.event_type} v{event.schema_version} is newer than target v{target}")
        up = self.index.get((event.event_type, event.schema_version))
        if up is None:
            raise MissingUpcaster(event.event_type, event.schema_version)
        outputs = up.transform(event)
        if isinstance(outputs, Event):
            outputs = [outputs]
        out: list[Event] = []
        for ev in outputs:
            if not isinstance(ev, Event) or ev.schema_version != up.to_version:
                raise TransformFailure(
                    f"upcaster {up.event_type} v{up.from_version} must emit events at v{up.to_version}")
            es = self._target_schema(ev.event_type, ev.schema_version)
            if es is not None and not conforms_event(ev, es):
                raise TransformFailure(
                    f"upcaster {up.event_type} v{up.from_version} output does not conform: "
                    + "; ".join(conforms_event(ev, es).messages))
            out.extend(self.event(ev))
        return out

    def iter_entries(self, entries: Iterable[SequencedEvent]) -> Iterator[SequencedEvent]:
        seq = None
        for entry in entries:
            if seq is None:
                seq = entry.sequence
            for ev in self.event(entry.event):
                yield SequencedEvent(ev, seq)
                seq += 1


def upcast_stream(entries: Iterable[SequencedEvent], chain: Iterable[Upcaster],
                  targets: dict[str, int] | None = None, *,
                  schema: StreamSchema | StoreSchema | None = None) -> list[SequencedEvent]:
    """Read-time view of ``entries`` with every event at its target version.

    Splits and drops renumber the view only, consecutively from the first
    input sequence. Raises MissingUpcaster when the chain has a gap.
    """
    return list(Upcasting(chain, targets, schema).iter_entries(entries))


def read_upcast(store: EventStore, stream_id: str, chain: Iterable[Upcaster],
                targets: dict[str, int] | None = None) -> list[SequencedEvent]:
    return upcast_stream(store.read(stream_id, 1), chain, targets)


# -- migration plans ---------------------------------------------------------------


class Technique(str, enum.Enum):
    VERSIONED_EVENTS = "versioned_events"
    WEAK_SCHEMA = "weak_schema"
    UPCAST = "upcast"
    IN_PLACE = "in_place"
    COPY_TRANSFORM = "copy_transform"


@dataclass(frozen=True)
class AddType:
    event_type: str

    def apply(self, ev: Event) -> list[Event]:
        return [ev]


@dataclass(frozen=True)
class AddField:
    event_type: str
    field: str
    default: Any
    from_version: int = 1

    def apply(self, ev: Event) -> list[Event]:
        if self.field in ev.payload:
            return [ev]
        return [ev.with_payload({**ev.payload, self.field: copy.deepcopy(self.default)})]


@dataclass(frozen=True)
class RenameField:
    event_type: str
    old: str
    new: str
    from_version: int = 1

    def apply(self, ev: Event) -> list[Event]:
        if self.old not in ev.payload:
            return [ev]
        payload = {(self.new if k == self.old else k): v for k, v in ev.payload.items()}
        return [ev.with_payload(payload)]


@dataclass(frozen=True)
class DropField:
    event_type: str
    field: str
    from_version: int = 1

    def apply(self, ev: Event) -> list[Event]:
        return [ev.with_payload({k: v for k, v in ev.payload.items() if k != self.field})]


@dataclass(frozen=True)
class SplitPart:
    event_type: str
    fields: tuple[str, ...]


@dataclass(frozen=True)
class SplitEvent:
    event_type: str
    parts: tuple[SplitPart, ...]
    from_version: int = 1

    def apply(self, ev: Event) -> list[Event]:
        return [ev.with_payload({f: ev.payload[f] for f in part.fields if f in ev.payload},
                                event_type=part.event_type)
                for part in self.parts]


@dataclass(frozen=True)
class DropEvent:
    event_type: str
    from_version: int = 1

    def apply(self, ev: Event) -> list[Event]:
        return []


Action = AddType | AddField | RenameField | DropField | SplitEvent | DropEvent
_ACTION_NAMES = {AddType: "add_type", AddField: "add_field", RenameField: "rename_field",
                 DropField: "drop_field", SplitEvent: "split_event", DropEvent: "drop_event"}


@dataclass(frozen=True)
class MigrationPlan:
    technique: Technique
    actions: tuple = ()
    source_version: int = 1
    target_version: int = 2
    scope: tuple[str, ...] | None = None
    target_schema: StoreSchema | None = None
    target_store_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "technique", Technique(self.technique))
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.scope is not None:
            object.__setattr__(self, "scope", tuple(self.scope))

    def check_references(self, source: StoreSchema | None) -> list[str]:
        """Action event types that neither schema declares."""
        known: set[str] = set()
        for sch in (source, self.target_schema):
            if sch is not None:
                known |= {es.event_type for ss in sch.stream_schemas for es in ss.event_schemas}
        if not known:
            return []
        return [f"{_ACTION_NAMES[type(a)]} references undeclared event type {a.event_type}"
                for a in self.actions if a.event_type not in known]

    def upcasters(self) -> list[Upcaster]:
        """Compile the actions: one single-step upcaster per (event type, from version)."""
        groups: dict[tuple[str, int], list] = {}
        for action in self.actions:
            if isinstance(action, AddType):
                continue
            groups.setdefault((action.event_type, action.from_version), []).append(action)
        chain = []
        for (etype, frm), actions in groups.items():
            chain.append(Upcaster(etype, frm, _compose(actions, etype, frm + 1)))
        return chain

    def upcasting(self, schema: StoreSchema | None = None) -> Upcasting:
        return Upcasting(self.upcasters(), schema=schema)


def _compose(actions: Sequence, event_type: str, to_version: int) -> Callable[[Event], list[Event]]:
    def transform(ev: Event) -> list[Event]:
        events = [ev]
        for action in actions:
            nxt: list[Event] = []
            for e in events:
                nxt.extend(action.apply(e) if e.event_type == event_type else [e])
            events = nxt
        return [e.with_payload(e.payload, version=to_version) for e in events]

    return transform


def _action_to_json(action) -> dict:
    out: dict[str, Any] = {"kind": "action", "action": _ACTION_NAMES[type(action)],
                           "event_type": action.event_type}
    if isinstance(action, AddField):
        out.update(field=action.field, default=action.default)
    elif isinstance(action, RenameField):
        out.update(old=action.old, new=action.new)
    elif isinstance(action, DropField):
        out.update(field=action.field)
    elif isinstance(action, SplitEvent):
        out["parts"] = [{"event_type": p.event_type, "fields": list(p.fields)} for p in action.parts]
    if not isinstance(action, AddType):
        out["from_version"] = action.from_version
    return out


def _action_from_json(obj: dict):
    name = obj.get("action")
    et = obj["event_type"]
    frm = int(obj.get("from_version", 1))
    if name == "add_type":
        return AddType(et)
    if name == "add_field":
        return AddField(et, obj["field"], obj.get("default"), frm)
    if name == "rename_field":
        return RenameField(et, obj["old"], obj["new"], frm)
    if name == "drop_field":
        return DropField(et, obj["field"], frm)
    if name == "split_event":
        return SplitEvent(et, tuple(SplitPart(p["event_type"], tuple(p["fields"])) for p in obj["parts"]), frm)
    if name == "drop_event":
        return DropEvent(et, frm)
    raise ValueError(f"unknown migration action {name!r}")


def dump_plan(plan: MigrationPlan, schema_ref: str | None = None) -> str:
    header = {"technique": plan.technique.value, "source_version": plan.source_version,
              "target_version": plan.target_version,
              "scope": list(plan.scope) if plan.scope is not None else None,
              "target_schema": schema_ref, "target_store_id": plan.target_store_id}
    return dump_document("migration_plan", header, [_action_to_json(a) for a in plan.actions])


def load_plan(text: str, base_dir: str | Path | None = None) -> MigrationPlan:
    head, objs = load_document(text, "migration_plan")
    schema = None
    ref = head.get("target_schema")
    if ref:
        path = Path(base_dir or ".") / ref
        schema = load_store_schema(path.read_text(encoding="utf-8"))
    actions = []
    for obj in objs:
        if obj.get("kind") != "action":
            raise ValueError(f"unknown plan entity kind {obj.get('kind')!r}")
        actions.append(_action_from_json(obj))
    scope = head.get("scope")
    return MigrationPlan(Technique(head["technique"]), tuple(actions),
                         int(head.get("source_version", 1)), int(head.get("target_version", 2)),
                         tuple(scope) if scope is not None else None, schema,
                         head.get("target_store_id"))


def read_plan(path: str | Path) -> MigrationPlan:
    path = Path(path)
    return load_plan(path.read_text(encoding="utf-8"), path.parent)


# -- reports ---------------------------------------------------------------------------


@dataclass
class StreamReport:
    stream_id: str
    events_in: int = 0
    events_out: int = 0
    mutations: int = 0
    backup_id: str | None = None
    lineage: list[tuple[int, list[int]]] = field(default_factory=list)


@dataclass
class MigrationReport:
    technique: Technique
    dry_run: bool = False
    streams: dict[str, StreamReport] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    target_store_id: str | None = None
    violations: list[str] = field(default_factory=list)

    @property
    def mutations(self) -> int:
        return sum(s.mutations for s in self.streams.values())

    @property
    def backups(self) -> list[str]:
        return [s.backup_id for s in self.streams.values() if s.backup_id]

    def to_lines(self) -> list[dict]:
        head = {"kind": "migration_report", "technique": self.technique.value, "dry_run": self.dry_run,
                "target_store_id": self.target_store_id, "mutations": self.mutations,
                "streams": len(self.streams), "failed": self.failed, "violations": self.violations}
        rows = [{"kind": "stream", "stream": s.stream_id, "events_in": s.events_in,
                 "events_out": s.events_out, "mutations": s.mutations, "backup": s.backup_id}
                for s in self.streams.values()]
        return [head, *rows]


# -- technique 4: in-place transformation ---------------------------------------------


def _transform_entries(upcasting: Upcasting, entries: Sequence[SequencedEvent],
                       report: StreamReport) -> list[list[Event]]:
    out = []
    seq = entries[0].sequence if entries else 1
    for entry in entries:
        outputs = upcasting.event(entry.event)
        report.lineage.append((entry.sequence, list(range(seq, seq + len(outputs)))))
        seq += len(outputs)
        out.append(outputs)
    report.events_in = len(entries)
    report.events_out = seq - (entries[0].sequence if entries else 1)
    return out


def _preview_store(store: EventStore, replaced: dict[str, list[Event]]) -> EventStore:
    tmp = EventStore(store.store_id)
    for sid in store.stream_ids():
        tmp.create_stream(sid, store.stream_type(sid))
        events = replaced[sid] if sid in replaced else [e.event for e in store.read(sid, 1)]
        if events:
            tmp.append(sid, 1, events)
    return tmp


def in_place_transform(store: EventStore, plan: MigrationPlan, *, dry_run: bool = False) -> MigrationReport:
    """Rewrite stored events so the store matches the plan's target schema.

    Refused outright on strict stores. On stores that demand backups, each
    stream is backed up before its first mutation. Streams are migrated one
    at a time; a failure restores the stream being migrated and raises
    TransformFailure with a report of what was already done.
    """
    if store.policy.degree is Degree.STRICT:
        raise ImmutabilityViolation("immutability policy 'strict' forbids in-place transformation")
    report = MigrationReport(Technique.IN_PLACE, dry_run)
    upcasting = plan.upcasting(plan.target_schema)
    scope = list(plan.scope) if plan.scope is not None else store.stream_ids()
    planned: dict[str, tuple[list[SequencedEvent], list[list[Event]]]] = {}
    try:
        for sid in scope:
            entries = store.read(sid, 1)
            sr = StreamReport(sid)
            planned[sid] = (entries, _transform_entries(upcasting, entries, sr))
            report.streams[sid] = sr
    except Exception as exc:
        raise TransformFailure(f"transform failed: {exc}", report) from exc
    if plan.target_schema is not None:
        preview = _preview_store(store, {sid: [e for outs in o for e in outs] for sid, (_, o) in planned.items()})
        result = conforms_store(preview, plan.target_schema)
        if not result:
            report.violations = [str(v) for v in result.violations]
            raise TransformFailure("transformed store would not conform to the target schema", report)
    for sid, (entries, outputs) in planned.items():
        report.streams[sid].mutations = sum(_edit_count(e.event, o) for e, o in zip(entries, outputs))
    if dry_run:
        return report
    for sid, (entries, outputs) in planned.items():
        sr = report.streams[sid]
        sr.mutations = 0
        with store.locked([sid]):
            if store.read(sid, 1) != entries:
                report.failed[sid] = "stream changed during migration"
                raise TransformFailure(f"stream {sid} changed during migration", report)
            if not any(_edit_count(e.event, o) for e, o in zip(entries, outputs)):
                continue
            if store.policy.backup_required_on_mutation:
                sr.backup_id = store.backup_stream(sid)
            try:
                sr.mutations = _apply_edits(store, sid, entries, outputs, sr.backup_id)
            except Exception as exc:
                store._restore_entries(sid, entries)
                report.failed[sid] = str(exc)
                raise TransformFailure(f"stream {sid}: {exc}", report) from exc
    return report


def _edit_count(original: Event, outputs: list[Event]) -> int:
    if outputs == [original]:
        return 0
    return max(len(outputs), 1)


def _apply_edits(store: EventStore, sid: str, entries: Sequence[SequencedEvent],
                 outputs: Sequence[list[Event]], backup_id: str | None) -> int:
    n = 0
    pos = entries[0].sequence if entries else 1
    for entry, outs in zip(entries, outputs):
        if outs == [entry.event]:
            pos += 1
            continue
        if not outs:
            store.delete_at(sid, pos, backup_id=backup_id)
            n += 1
            continue
        store.update_at(sid, pos, outs[0], backup_id=backup_id)
        n += 1
        for extra in outs[1:]:
            pos += 1
            store.insert_at(sid, pos, extra, backup_id=backup_id)
            n += 1
        pos += 1
    return n


# -- technique 5: copy-and-transform ---------------------------------------------------


def copy_transform(source: EventStore, plan: MigrationPlan, target_store_id: str | None = None, *,
                   target_root: str | Path | None = None,
                   dry_run: bool = False) -> tuple[EventStore | None, MigrationReport]:
    """Write transformed copies of the source streams into a new store.

    Streams outside the plan's scope are copied unchanged. The source is
    never written; its streams stay locked against appends while being read.
    The report carries the lineage (old sequence -> new sequences) per
    stream, also written to ``lineage.log`` in an on-disk target.
    """
    target_id = target_store_id or plan.target_store_id or f"{source.store_id}-v{plan.target_version}"
    if target_id == source.store_id:
        raise ValueError("target store id must differ from the source store id")
    if target_root is not None and Path(target_root).exists() and any(Path(target_root).iterdir()):
        raise FileExistsError(f"target {target_root} already exists")
    report = MigrationReport(Technique.COPY_TRANSFORM, dry_run, target_store_id=target_id)
    upcasting = plan.upcasting(plan.target_schema)
    scope = set(plan.scope) if plan.scope is not None else None
    identity = Upcasting(())
    ids = source.stream_ids()
    transformed: dict[str, tuple[str | None, list[Event]]] = {}
    with source.locked(ids):
        try:
            for sid in ids:
                entries = source.read_stitched(sid) if source.stream(sid).archives else source.read(sid, 1)
                sr = StreamReport(sid)
                chosen = upcasting if scope is None or sid in scope else identity
                outputs = _transform_entries(chosen, entries, sr)
                report.streams[sid] = sr
                transformed[sid] = (source.stream_type(sid), [e for outs in outputs for e in outs])
        except Exception as exc:
            raise TransformFailure(f"transform failed: {exc}", report) from exc
    if dry_run:
        return None, report

    created_root = None
    try:
        if target_root is not None:
            from .storage import init_store

            created_root = Path(target_root)
            target = init_store(created_root, target_id, source.policy,
                                plan.target_schema or source.bound_schema)
        else:
            target = EventStore(target_id, source.policy,
                                bound_schema=plan.target_schema or source.bound_schema)
        for sid, (stype, events) in transformed.items():
            target.create_stream(sid, stype)
            for i in range(0, len(events), 1000):
                target.append(sid, i + 1, events[i:i + 1000])
        if plan.target_schema is not None:
            result = conforms_store(target, plan.target_schema)
            if not result:
                report.violations = [str(v) for v in result.violations]
                raise TransformFailure("target store does not conform to the target schema", report)
        if created_root is not None:
            from .records import dumps

            with open(created_root / "lineage.log", "w", encoding="utf-8") as fh:
                for sid, sr in report.streams.items():
                    for old, new in sr.lineage:
                        fh.write(dumps({"stream": sid, "seq": old, "new": new}) + "\n")
    except Exception as exc:
        if created_root is not None:
            try:
                target.close()
            except Exception:
                pass
            shutil.rmtree(created_root, ignore_errors=True)
        if isinstance(exc, TransformFailure):
            raise
        raise TransformFailure(f"copy failed: {exc}", report) from exc
    return target, report


# -- prevention: cold storage ------------------------------------------------------------


def archive_cold(store: EventStore, stream_id: str, before_sequence: int,
                 directory: str | Path | None = None) -> Path:
    """Move events below ``before_sequence`` out of the live stream into an archive file.

    Live reads, rebuilds and queries skip archived events from then on;
    ``store.read_stitched`` still returns the full history.
    """
    return store.archive(stream_id, before_sequence, directory)
