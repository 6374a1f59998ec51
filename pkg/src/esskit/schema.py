"""Event, stream and store schemas and their ``conforms`` predicates.

Schemas are plain frozen values. Conformance never raises for bad data: it
returns a :class:`Conformance` listing every violation found.

Matching is by the exact ``(event_type, version)`` pair. Events are
open-content by default (undeclared payload fields are tolerated); set
``strict_content`` on an :class:`EventSchema` to reject them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Sequence

from .errors import UnassignedStreamType
from .events import EVENT_TYPE_RE, Event, SequencedEvent
from .records import dump_document, load_document

KINDS = ("string", "integer", "decimal", "boolean", "timestamp", "list", "map")
_KIND_ALIASES = {"list-of": "list", "list_of": "list", "map-of": "map", "map_of": "map"}
RULE_KINDS = ("precedes", "at_most_once", "initial", "terminal")


class _NoDefault:
    def __repr__(self) -> str:
        return "NO_DEFAULT"


NO_DEFAULT: Any = _NoDefault()


def _is_timestamp(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, int):
        return True  # epoch milliseconds
    if not isinstance(value, str):
        return False
    text = value[:-1] + "+00:00" if value.endswith("Z") else value
    try:
        datetime.fromisoformat(text)
    except ValueError:
        return False
    return True


def value_matches(kind: str, value: Any, of: str | None = None) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "decimal":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "timestamp":
        return _is_timestamp(value)
    if kind == "list":
        return isinstance(value, list) and (of is None or all(value_matches(of, v) for v in value))
    if kind == "map":
        return isinstance(value, dict) and (of is None or all(value_matches(of, v) for v in value.values()))
    return False


def _type_name(value: Any) -> str:
    if value is None:
        return "null"
    return {bool: "boolean", int: "integer", float: "decimal", str: "string",
            list: "list", dict: "map"}.get(type(value), type(value).__name__)


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    required: bool = True
    default: Any = NO_DEFAULT
    of: str | None = None  # element kind for list / map

    def __post_init__(self) -> None:
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.of is not None:
            if kind not in ("list", "map"):
                raise ValueError("'of' only applies to list and map fields")
            if self.of not in KINDS or self.of in ("list", "map"):
                raise ValueError(f"unsupported element kind {self.of!r}")
        if self.has_default and not self.accepts(self.default):
            raise ValueError(f"default for {self.name} is not a {kind}")

    @property
    def has_default(self) -> bool:
        return self.default is not NO_DEFAULT

    def accepts(self, value: Any) -> bool:
        return value_matches(self.kind, value, self.of)

    def describe(self) -> str:
        return f"{self.kind}<{self.of}>" if self.of else self.kind

    def to_json(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind, "required": self.required}
        if self.of is not None:
            out["of"] = self.of
        if self.has_default:
            out["default"] = self.default
        return out

    @classmethod
    def from_json(cls, obj: dict) -> FieldSpec:
        return cls(obj["name"], obj["kind"], bool(obj.get("required", True)),
                   obj.get("default", NO_DEFAULT), obj.get("of"))


@dataclass(frozen=True)
class EventSchema:
    event_type: str
    version: int = 1
    fields: tuple[FieldSpec, ...] = ()
    strict_content: bool = False

    def __post_init__(self) -> None:
        if not EVENT_TYPE_RE.fullmatch(self.event_type):
            raise ValueError(f"invalid event type {self.event_type!r}")
        if self.version < 1:
            raise ValueError("schema version must be >= 1")
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field names in {self.event_type} v{self.version}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.event_type, self.version)

    def field(self, name: str) -> FieldSpec | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None


@dataclass(frozen=True)
class OrderingRule:
    kind: str
    subject: str
    object: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown ordering rule {self.kind!r}")
        if self.kind == "precedes":
            if self.object is None or self.object == self.subject:
                raise ValueError("precedes needs two distinct event types")
        elif self.object is not None:
            raise ValueError(f"{self.kind} takes a single event type")

    def __str__(self) -> str:
        if self.kind == "precedes":
            return f"precedes({self.subject}, {self.object})"
        return f"{self.kind}({self.subject})"

    @property
    def event_types(self) -> tuple[str, ...]:
        return (self.subject,) if self.object is None else (self.subject, self.object)


@dataclass(frozen=True)
class StreamSchema:
    stream_type: str
    event_schemas: tuple[EventSchema, ...] = ()
    rules: tuple[OrderingRule, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "event_schemas", tuple(self.event_schemas))
        object.__setattr__(self, "rules", tuple(self.rules))
        keys = [e.key for e in self.event_schemas]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate event schema in stream type {self.stream_type}")
        types = self.event_types
        for rule in self.rules:
            for t in rule.event_types:
                if t not in types:
                    raise ValueError(f"rule {rule} references undeclared event type {t}")

    @property
    def event_types(self) -> set[str]:
        return {e.event_type for e in self.event_schemas}

    def schema_for(self, event_type: str, version: int) -> EventSchema | None:
        for es in self.event_schemas:
            if es.event_type == event_type and es.version == version:
                return es
        return None


@dataclass(frozen=True)
class CohesionRule:
    """When a stream of ``stream_type`` contains ``event_type``, a stream of
    type ``requires`` must exist in the store."""

    stream_type: str
    event_type: str
    requires: str

    def __str__(self) -> str:
        return f"cohesion({self.stream_type}.{self.event_type} -> {self.requires})"


@dataclass(frozen=True)
class StoreSchema:
    schema_id: str
    schema_version: int = 1
    stream_schemas: tuple[StreamSchema, ...] = ()
    cohesion_rules: tuple[CohesionRule, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stream_schemas", tuple(self.stream_schemas))
        object.__setattr__(self, "cohesion_rules", tuple(self.cohesion_rules))
        types = [s.stream_type for s in self.stream_schemas]
        if len(set(types)) != len(types):
            raise ValueError("duplicate stream types")
        for rule in self.cohesion_rules:
            src = self.stream_schema(rule.stream_type)
            if src is None or self.stream_schema(rule.requires) is None:
                raise ValueError(f"{rule} references an undeclared stream type")
            if rule.event_type not in src.event_types:
                raise ValueError(f"{rule} references an undeclared event type")

    def stream_schema(self, stream_type: str) -> StreamSchema | None:
        for s in self.stream_schemas:
            if s.stream_type == stream_type:
                return s
        return None

    def event_schema(self, stream_type: str, event_type: str, version: int) -> EventSchema | None:
        ss = self.stream_schema(stream_type)
        return None if ss is None else ss.schema_for(event_type, version)


# -- conformance ----------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    message: str
    stream_id: str | None = None
    sequence: int | None = None
    rule: str | None = None

    def __str__(self) -> str:
        where = []
        if self.stream_id is not None:
            where.append(f"stream {self.stream_id}")
        if self.sequence is not None:
            where.append(f"seq {self.sequence}")
        prefix = " ".join(where)
        return f"{prefix}: {self.message}" if prefix else self.message

    def to_json(self) -> dict:
        return {"stream": self.stream_id, "seq": self.sequence, "rule": self.rule,
                "message": self.message}


@dataclass(frozen=True)
class Conformance:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    @property
    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def _event_violations(event: Event, schema: EventSchema) -> list[str]:
    out = []
    if event.event_type != schema.event_type:
        out.append(f"event type {event.event_type} does not match schema {schema.event_type}")
    if event.schema_version != schema.version:
        out.append(f"version {event.schema_version} does not match schema v{schema.version}")
    payload = event.payload
    for spec in schema.fields:
        if spec.name not in payload:
            if spec.required:
                out.append(f"missing required field {spec.name}")
            continue
        value = payload[spec.name]
        if not spec.accepts(value):
            out.append(f"field {spec.name}: expected {spec.describe()}, got {_type_name(value)}")
    if schema.strict_content:
        declared = {f.name for f in schema.fields}
        for name in payload:
            if name not in declared:
                out.append(f"undeclared field {name}")
    return out


def conforms_event(event: Event, schema: EventSchema) -> Conformance:
    return Conformance(tuple(Violation(m) for m in _event_violations(event, schema)))


def _as_entries(stream) -> tuple[str | None, Sequence[SequencedEvent]]:
    if hasattr(stream, "entries"):
        return stream.stream_id, stream.entries
    items = list(stream)
    if items and isinstance(items[0], Event):
        return None, [SequencedEvent(e, i) for i, e in enumerate(items, 1)]
    return None, items


def rule_violations(entries: Sequence[SequencedEvent], rule: OrderingRule) -> list[int]:
    """Sequences at which ``rule`` is broken (first offending position per breach)."""
    bad = []
    if rule.kind == "precedes":
        seen = False
        for e in entries:
            if e.event_type == rule.subject:
                seen = True
            elif e.event_type == rule.object and not seen:
                bad.append(e.sequence)
    elif rule.kind == "at_most_once":
        count = 0
        for e in entries:
            if e.event_type == rule.subject:
                count += 1
                if count > 1:
                    bad.append(e.sequence)
    elif rule.kind == "initial":
        if entries and entries[0].event_type != rule.subject:
            bad.append(entries[0].sequence)
    elif rule.kind == "terminal":
        closed = False
        for e in entries:
            if closed:
                bad.append(e.sequence)
                break
            if e.event_type == rule.subject:
                closed = True
    return bad


def _rule_message(rule: OrderingRule, seq: int) -> str:
    if rule.kind == "precedes":
        return f"ordering rule {rule} violated: {rule.object} at sequence {seq} has no earlier {rule.subject}"
    if rule.kind == "at_most_once":
        return f"ordering rule {rule} violated: repeated {rule.subject} at sequence {seq}"
    if rule.kind == "initial":
        return f"ordering rule {rule} violated: stream starts with another event at sequence {seq}"
    return f"ordering rule {rule} violated: event after {rule.subject} at sequence {seq}"


def conforms_stream(stream, schema: StreamSchema) -> Conformance:
    """Every event matches a member event schema and every ordering rule holds.

    ``stream`` may be an EventStream, a list of SequencedEvent, or a list of
    Event (numbered from 1).
    """
    stream_id, entries = _as_entries(stream)
    out: list[Violation] = []
    for entry in entries:
        ev = entry.event
        es = schema.schema_for(ev.event_type, ev.schema_version)
        if es is None:
            out.append(Violation(f"no event schema for type {ev.event_type} v{ev.schema_version}",
                                 stream_id, entry.sequence))
            continue
        for msg in _event_violations(ev, es):
            out.append(Violation(f"{ev.event_type} v{ev.schema_version}: {msg}", stream_id, entry.sequence))
    for rule in schema.rules:
        for seq in rule_violations(entries, rule):
            out.append(Violation(_rule_message(rule, seq), stream_id, seq, str(rule)))
    return Conformance(tuple(out))


def _store_entries(store, stream_id: str) -> Sequence[SequencedEvent]:
    st = store.stream(stream_id)
    if st.archives:
        return store.read_stitched(stream_id)
    return st.entries


def conforms_store(store, schema: StoreSchema) -> Conformance:
    """Each stream conforms to the schema of its type and all cohesion rules hold.

    Raises UnassignedStreamType if any stream carries no type tag.
    """
    streams = [store.stream(sid) for sid in store.stream_ids()]
    for st in streams:
        if st.stream_type is None:
            raise UnassignedStreamType(st.stream_id)
    out: list[Violation] = []
    present_types = {st.stream_type for st in streams}
    for st in streams:
        ss = schema.stream_schema(st.stream_type)
        if ss is None:
            out.append(Violation(f"no stream schema for type {st.stream_type}", st.stream_id))
            continue
        entries = _store_entries(store, st.stream_id)
        out.extend(conforms_stream(_Entries(st.stream_id, entries), ss).violations)
    for rule in schema.cohesion_rules:
        if rule.requires in present_types:
            continue
        for st in streams:
            if st.stream_type != rule.stream_type:
                continue
            for e in _store_entries(store, st.stream_id):
                if e.event_type == rule.event_type:
                    out.append(Violation(
                        f"{rule} violated: {rule.event_type} present but no stream of type "
                        f"{rule.requires} exists", st.stream_id, e.sequence, str(rule)))
                    break
    return Conformance(tuple(out))


@dataclass(frozen=True)
class _Entries:
    stream_id: str
    entries: Sequence[SequencedEvent] = field(default_factory=tuple)


# -- containment (versioned events) ------------------------------------------------


_WIDER = {("integer", "decimal"), ("integer", "timestamp")}


def _scalar_within(old: str, new: str) -> bool:
    return old == new or (old, new) in _WIDER


def _kind_within(old: FieldSpec, new: FieldSpec) -> bool:
    """Every value accepted by ``old`` is accepted by ``new``."""
    if old.kind in ("list", "map") or new.kind in ("list", "map"):
        if old.kind != new.kind:
            return False
        if new.of is None:
            return True
        return old.of is not None and _scalar_within(old.of, new.of)
    return _scalar_within(old.kind, new.kind)


def event_schema_gaps(old: EventSchema, new: EventSchema) -> list[str]:
    """Reasons why some event conforming to ``old`` may fail ``new`` (empty if none)."""
    label = f"{old.event_type} v{old.version}"
    if old.key != new.key:
        return [f"{label}: different event schema"]
    gaps = []
    for nf in new.fields:
        of = old.field(nf.name)
        if of is None:
            if nf.required:
                gaps.append(f"{label}: new required field {nf.name}")
            elif not old.strict_content:
                gaps.append(f"{label}: new field {nf.name} may clash with undeclared values")
            continue
        if nf.required and not of.required:
            gaps.append(f"{label}: field {nf.name} became required")
        if not _kind_within(of, nf):
            gaps.append(f"{label}: field {nf.name} changed kind {of.describe()} -> {nf.describe()}")
    if new.strict_content:
        if not old.strict_content:
            gaps.append(f"{label}: content became strict")
        else:
            for f in old.fields:
                if new.field(f.name) is None:
                    gaps.append(f"{label}: field {f.name} no longer declared")
    return gaps


# Every ordering rule is a safety property whose verdict on the next event
# depends only on the first event type and the set of types seen so far, so
# the streams a stream schema admits form a small finite automaton.

_State = tuple  # (first event type or None, frozenset of seen types)


def _breaks(rule: OrderingRule, state: _State, etype: str) -> bool:
    first, seen = state
    if rule.kind == "precedes":
        return etype == rule.object and rule.subject not in seen
    if rule.kind == "at_most_once":
        return etype == rule.subject and rule.subject in seen
    if rule.kind == "initial":
        return first is None and etype != rule.subject
    return rule.subject in seen  # terminal


def _explore(types: Iterable[str], rules: Iterable[OrderingRule]):
    """Breadth-first walk of the type sequences that satisfy ``rules``.

    Yields (state, path) for every reachable state, including the empty stream.
    """
    types = sorted(types)
    rules = tuple(rules)
    start: _State = (None, frozenset())
    paths = {start: ()}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        yield state, paths[state]
        for t in types:
            if any(_breaks(r, state, t) for r in rules):
                continue
            nxt = (state[0] or t, state[1] | {t})
            if nxt not in paths:
                paths[nxt] = paths[state] + (t,)
                queue.append(nxt)


def reachable_types(schema: StreamSchema) -> set[str]:
    """Event types that occur in at least one stream the schema admits."""
    out: set[str] = set()
    for (_, seen), _path in _explore(schema.event_types, schema.rules):
        out |= seen
    return out


def _rule_witness(rule: OrderingRule, old: StreamSchema) -> tuple[str, ...] | None:
    """A type sequence admitted by ``old`` that breaks ``rule``, if any."""
    types = sorted(old.event_types)
    for state, path in _explore(types, old.rules):
        for t in types:
            if not any(_breaks(r, state, t) for r in old.rules) and _breaks(rule, state, t):
                return path + (t,)
    return None


def stream_schema_gaps(old: StreamSchema, new: StreamSchema) -> list[str]:
    if old.stream_type != new.stream_type:
        return [f"stream type {old.stream_type} != {new.stream_type}"]
    gaps = []
    live = reachable_types(old)
    for es in old.event_schemas:
        if es.event_type not in live:
            continue  # the old rules never let this type occur
        match = new.schema_for(es.event_type, es.version)
        if match is None:
            gaps.append(f"stream type {old.stream_type} lacks {es.event_type} v{es.version}")
        else:
            gaps.extend(f"stream type {old.stream_type}: {g}" for g in event_schema_gaps(es, match))
    old_rules = set(old.rules)
    for rule in new.rules:
        if rule in old_rules:
            continue
        witness = _rule_witness(rule, old)
        if witness is not None:
            gaps.append(f"stream type {old.stream_type}: new ordering rule {rule} "
                        f"breaks [{', '.join(witness)}]")
    return gaps


def _cohesion_witness(rule: CohesionRule, old: StoreSchema) -> tuple[str, ...] | None:
    """An old stream of ``rule.stream_type`` holding ``rule.event_type`` that
    forces no stream of type ``rule.requires`` to exist."""
    src = old.stream_schema(rule.stream_type)
    if src is None or rule.event_type not in src.event_types or rule.requires == rule.stream_type:
        return None
    forcing = {c.event_type for c in old.cohesion_rules
               if c.stream_type == rule.stream_type and c.requires == rule.requires}
    for (_, seen), path in _explore(src.event_types, src.rules):
        if rule.event_type in seen and not seen & forcing:
            return path
    return None


def superset_gaps(old: StoreSchema, new: StoreSchema) -> list[str]:
    """Why ``new`` is not a superset of ``old``; empty means it is.

    Every old stream schema must be contained in the new stream schema of the
    same type: every old event schema is present and accepts at least what it
    accepted before, and every added ordering or cohesion rule holds on all
    streams and stores the old schema admits.
    """
    gaps = []
    for ss in old.stream_schemas:
        target = new.stream_schema(ss.stream_type)
        if target is None:
            gaps.append(f"stream type {ss.stream_type} missing")
            continue
        gaps.extend(stream_schema_gaps(ss, target))
    old_rules = set(old.cohesion_rules)
    for rule in new.cohesion_rules:
        if rule in old_rules:
            continue
        witness = _cohesion_witness(rule, old)
        if witness is not None:
            gaps.append(f"new cohesion rule {rule} breaks a store holding "
                        f"[{', '.join(witness)}] alone")
    return gaps


def schema_superset(old: StoreSchema, new: StoreSchema) -> bool:
    return not superset_gaps(old, new)


# -- text documents ----------------------------------------------------------------


def dump_store_schema(schema: StoreSchema) -> str:
    lines: list[dict[str, Any]] = []
    for ss in schema.stream_schemas:
        lines.append({"kind": "stream_schema", "stream_type": ss.stream_type})
        for es in ss.event_schemas:
            lines.append({"kind": "event_schema", "stream_type": ss.stream_type,
                          "event_type": es.event_type, "version": es.version,
                          "strict": es.strict_content, "fields": [f.to_json() for f in es.fields]})
        for rule in ss.rules:
            obj = {"kind": "ordering_rule", "stream_type": ss.stream_type, "rule": rule.kind,
                   "subject": rule.subject}
            if rule.object is not None:
                obj["object"] = rule.object
            lines.append(obj)
    for rule in schema.cohesion_rules:
        lines.append({"kind": "cohesion_rule", "stream_type": rule.stream_type,
                      "event_type": rule.event_type, "requires": rule.requires})
    return dump_document("store_schema", {"schema_id": schema.schema_id,
                                          "schema_version": schema.schema_version}, lines)


def load_store_schema(text: str) -> StoreSchema:
    head, objs = load_document(text, "store_schema")
    order: list[str] = []
    events: dict[str, list[EventSchema]] = {}
    rules: dict[str, list[OrderingRule]] = {}
    cohesion: list[CohesionRule] = []

    def declare(stream_type: str) -> None:
        if stream_type not in events:
            order.append(stream_type)
            events[stream_type] = []
            rules[stream_type] = []

    for obj in objs:
        kind = obj.get("kind")
        if kind == "stream_schema":
            declare(obj["stream_type"])
        elif kind == "event_schema":
            declare(obj["stream_type"])
            events[obj["stream_type"]].append(EventSchema(
                obj["event_type"], int(obj.get("version", 1)),
                tuple(FieldSpec.from_json(f) for f in obj.get("fields", [])),
                bool(obj.get("strict", False))))
        elif kind == "ordering_rule":
            declare(obj["stream_type"])
            rules[obj["stream_type"]].append(OrderingRule(obj["rule"], obj["subject"], obj.get("object")))
        elif kind == "cohesion_rule":
            cohesion.append(CohesionRule(obj["stream_type"], obj["event_type"], obj["requires"]))
        else:
            raise ValueError(f"unknown schema entity kind {kind!r}")
    return StoreSchema(head["schema_id"], int(head.get("schema_version", 1)),
                       tuple(StreamSchema(t, tuple(events[t]), tuple(rules[t])) for t in order),
                       tuple(cohesion))


def event_types_of(schema: StoreSchema) -> set[str]:
    return {es.event_type for ss in schema.stream_schemas for es in ss.event_schemas}


def iter_event_schemas(schema: StoreSchema) -> Iterable[tuple[str, EventSchema]]:
    for ss in schema.stream_schemas:
        for es in ss.event_schemas:
            yield ss.stream_type, es
