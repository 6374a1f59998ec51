"""Command/query runtime on top of an :class:`~esskit.store.EventStore`.

Write path: a command is routed to its aggregate, the aggregate's stream is
read and folded into a projection, the pure ``accept`` rule turns
projection + command into events or a :class:`Rejection`, and the events are
appended with the expected sequence observed during the read.

Read path: projectors fold source streams into projections, in one of three
modes. ``on_demand`` folds at query time, ``pre_built`` folds notifications
delivered after the fact (so queries may observe stale state, reported
through the checkpoint), and ``synchronous`` folds inside the write.

Folds over several streams see events merged round-robin by stream id; the
merge order across streams carries no meaning, so projector folds must not
depend on it.
"""

from __future__ import annotations

import copy
import enum
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import (
    ConcurrencyConflict,
    DuplicateStream,
    InvalidProjection,
    NonConformingEvent,
    TargetedRebuildUnsupported,
    UnknownCommandType,
    UnknownProjector,
    UnknownQuery,
)
from .events import Event, SequencedEvent
from .schema import StoreSchema, conforms_event
from .store import EventStore, EventStream, MutationRecord


@dataclass(frozen=True)
class Command:
    command_type: str
    target_stream: str
    payload: dict[str, Any] = field(default_factory=dict)
    expected_sequence: int | None = None

    def to_json(self) -> dict:
        return {"type": self.command_type, "stream": self.target_stream,
                "payload": self.payload, "expect": self.expected_sequence}


@dataclass(frozen=True)
class Rejection:
    """A command refused by domain validation. A value, not an error."""

    code: str
    message: str = ""


AcceptRule = Callable[[Any, Command], "list[Event] | Rejection"]


@dataclass
class AggregateDefinition:
    name: str
    command_types: Sequence[str]
    initial: Any
    fold: Callable[[Any, Event], Any]
    accept: AcceptRule
    snapshot_interval: int | None = None
    stream_type: str | None = None  # tag given to streams this aggregate creates

    def __post_init__(self) -> None:
        if self.snapshot_interval is not None and self.snapshot_interval < 1:
            raise ValueError("snapshot_interval must be a positive integer")


class Mode(str, enum.Enum):
    ON_DEMAND = "on_demand"
    PRE_BUILT = "pre_built"
    SYNCHRONOUS = "synchronous"


@dataclass
class ProjectorDefinition:
    """How to fold streams into a projection.

    ``fold(state, stream_id, event)`` returns the next state. Sources are the
    explicit ``streams`` if given, else all streams tagged ``stream_type``,
    else every stream. With ``combine`` set, each stream is folded on its own
    and ``combine(list_of_partials)`` yields the state; that is what makes
    targeted rebuilds possible.
    """

    name: str
    initial: Any
    fold: Callable[[Any, str, Event], Any]
    mode: Mode = Mode.PRE_BUILT
    streams: Sequence[str] | None = None
    stream_type: str | None = None
    queries: Mapping[str, Callable[[Any, Mapping[str, Any]], Any]] = field(default_factory=dict)
    combine: Callable[[list[Any]], Any] | None = None
    strict: bool = False

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)

    def selects(self, stream: EventStream) -> bool:
        if self.streams is not None:
            return stream.stream_id in self.streams
        if self.stream_type is not None:
            return stream.stream_type == self.stream_type
        return True


@dataclass(frozen=True)
class Projection:
    projection_id: str
    state: Any
    checkpoint: dict[str, int] = field(default_factory=dict)
    valid: bool = True
    partials: dict[str, Any] | None = None
    processed: int = 0


# -- project / accept -----------------------------------------------------------


def merge_round_robin(sources: Sequence[tuple[str, Sequence[SequencedEvent]]]):
    """Yield ``(stream_id, entry)`` taking one entry per stream in id order."""
    ordered = sorted(sources, key=lambda s: s[0])
    longest = max((len(entries) for _, entries in ordered), default=0)
    for i in range(longest):
        for sid, entries in ordered:
            if i < len(entries):
                yield sid, entries[i]


def _sources(streams: Iterable) -> list[tuple[str, str | None, Sequence[SequencedEvent]]]:
    out = []
    for s in streams:
        if isinstance(s, tuple):
            sid, entries = s
            out.append((sid, None, list(entries)))
        else:
            out.append((s.stream_id, s.stream_type, s.entries))
    ids = [sid for sid, _, _ in out]
    if len(set(ids)) != len(ids):
        raise ValueError("project() needs disjoint streams")
    return out


def _check_conformance(defn: ProjectorDefinition, schema: StoreSchema | None,
                       stream_type: str | None, sid: str, entry: SequencedEvent) -> None:
    if not defn.strict or schema is None:
        return
    ev = entry.event
    es = schema.event_schema(stream_type, ev.event_type, ev.schema_version) if stream_type else None
    if es is None:
        raise NonConformingEvent(
            f"stream {sid} seq {entry.sequence}: no event schema for type {ev.event_type} v{ev.schema_version}")
    result = conforms_event(ev, es)
    if not result:
        raise NonConformingEvent(f"stream {sid} seq {entry.sequence}: {'; '.join(result.messages)}")


def project(streams: Iterable, definition: ProjectorDefinition, start: Projection | None = None,
            *, schema: StoreSchema | None = None, projection_id: str | None = None) -> Projection:
    """Fold ``streams`` into a projection, continuing from ``start`` if given.

    ``streams`` holds EventStream snapshots or ``(stream_id, entries)`` pairs.
    Only entries past the start checkpoint are folded. The checkpoint maps
    each stream to the last sequence folded.
    """
    if start is not None and not start.valid:
        raise InvalidProjection(f"projection {start.projection_id} is invalid; rebuild it")
    sources = _sources(streams)
    checkpoint = dict(start.checkpoint) if start is not None else {}
    types = {sid: st for sid, st, _ in sources}
    pending = []
    for sid, _, entries in sources:
        done = checkpoint.get(sid, 0)
        pending.append((sid, [e for e in entries if e.sequence > done]))
    processed = start.processed if start is not None else 0

    if definition.combine is not None:
        partials = dict(start.partials or {}) if start is not None else {}
        for sid, entries in pending:
            if not entries:
                continue
            state = partials[sid] if sid in partials else copy.deepcopy(definition.initial)
            for entry in entries:
                _check_conformance(definition, schema, types[sid], sid, entry)
                state = definition.fold(state, sid, entry.event)
            partials[sid] = state
            checkpoint[sid] = entries[-1].sequence
            processed += len(entries)
        state = definition.combine([partials[s] for s in sorted(partials)])
        return Projection(projection_id or (start.projection_id if start else definition.name),
                          state, checkpoint, True, partials, processed)

    state = start.state if start is not None else copy.deepcopy(definition.initial)
    for sid, entry in merge_round_robin(pending):
        _check_conformance(definition, schema, types[sid], sid, entry)
        state = definition.fold(state, sid, entry.event)
        checkpoint[sid] = entry.sequence
        processed += 1
    return Projection(projection_id or (start.projection_id if start else definition.name),
                      state, checkpoint, True, None, processed)


def accept(projection: Projection, command: Command, rule: AcceptRule) -> list[Event] | Rejection:
    """Pure decision: events to append for ``command``, or a Rejection."""
    if not projection.valid:
        raise InvalidProjection(f"projection {projection.projection_id} is invalid")
    outcome = rule(projection.state, command)
    if isinstance(outcome, Rejection):
        return outcome
    events = list(outcome)
    for ev in events:
        if not isinstance(ev, Event):
            raise TypeError(f"accept rule returned {type(ev).__name__}, expected Event")
    return events


def fold_aggregate(entries: Iterable[SequencedEvent], definition: AggregateDefinition,
                   state: Any = None, checkpoint: int = 0, stream_id: str = "") -> Projection:
    st = copy.deepcopy(definition.initial) if state is None else state
    last = checkpoint
    n = 0
    for entry in entries:
        if entry.sequence <= last:
            continue
        st = definition.fold(st, entry.event)
        last = entry.sequence
        n += 1
    return Projection(f"{definition.name}:{stream_id}", st, {stream_id: last} if last else {}, True, None, n)


# -- results -------------------------------------------------------------------


@dataclass(frozen=True)
class CommandResult:
    command: Command
    appended: tuple[SequencedEvent, ...] = ()
    rejection: Rejection | None = None
    conflict: ConcurrencyConflict | None = None

    @property
    def status(self) -> str:
        if self.rejection is not None:
            return "rejected"
        if self.conflict is not None:
            return "conflict"
        return "appended"

    @property
    def ok(self) -> bool:
        return self.status == "appended"

    def to_json(self) -> dict:
        out: dict[str, Any] = {"status": self.status, "stream": self.command.target_stream}
        if self.rejection is not None:
            out["code"] = self.rejection.code
            out["message"] = self.rejection.message
        elif self.conflict is not None:
            out["message"] = str(self.conflict)
        else:
            out["sequences"] = [e.sequence for e in self.appended]
        return out


@dataclass(frozen=True)
class QueryResult:
    query: str
    value: Any
    checkpoint: dict[str, int]
    mode: Mode
    lag: dict[str, int] = field(default_factory=dict)

    @property
    def window(self) -> int:
        """Events appended but not yet reflected in the answer."""
        return sum(self.lag.values())


@dataclass(frozen=True)
class Snapshot:
    aggregate: str
    stream_id: str
    state: Any
    sequence: int


@dataclass(frozen=True)
class RebuildStats:
    projector: str
    scope: tuple[str, ...] | None
    events: int
    seconds: float


@dataclass
class Decision:
    """The read/fold/accept half of command handling, before the append."""

    command: Command
    aggregate: AggregateDefinition
    expected_sequence: int
    projection: Projection
    outcome: list[Event] | Rejection


class _Runner:
    def __init__(self, defn: ProjectorDefinition) -> None:
        self.defn = defn
        self.projection = Projection(defn.name, copy.deepcopy(defn.initial))
        self.stale: set[str] = set()
        self.pending: deque[tuple[str, SequencedEvent]] = deque()
        self.lock = threading.RLock()

    def set_invalid(self, stream_id: str) -> None:
        self.stale.add(stream_id)
        self.projection = replace(self.projection, valid=False)
        self.pending = deque(p for p in self.pending if p[0] != stream_id)


class EventSourcedSystem:
    """Command handler, query handler and projector host over one store."""

    def __init__(self, store: EventStore, aggregates: Iterable[AggregateDefinition] = (),
                 projectors: Iterable[ProjectorDefinition] = (), *,
                 schema: StoreSchema | None = None, auto_deliver: bool = False) -> None:
        self.store = store
        self.schema = schema if schema is not None else store.bound_schema
        self.auto_deliver = auto_deliver
        self._aggregates: dict[str, AggregateDefinition] = {}
        self._by_command: dict[str, AggregateDefinition] = {}
        self._runners: dict[str, _Runner] = {}
        self._queries: dict[str, tuple[str, Callable | None]] = {}
        self._snapshots: dict[tuple[str, str], Snapshot] = {}
        # per-thread: the stream being committed and its staged synchronous projections
        self._tx = threading.local()
        self.rebuild_stats: list[RebuildStats] = []
        for agg in aggregates:
            self.register_aggregate(agg)
        for p in projectors:
            self.register_projector(p)
        store.add_append_listener(self._on_append)
        store.add_mutation_listener(self._on_mutation)

    # -- registration --------------------------------------------------------

    def register_aggregate(self, defn: AggregateDefinition) -> None:
        for ct in defn.command_types:
            if ct in self._by_command:
                raise ValueError(f"command type {ct} already routed to {self._by_command[ct].name}")
        self._aggregates[defn.name] = defn
        for ct in defn.command_types:
            self._by_command[ct] = defn

    def register_projector(self, defn: ProjectorDefinition) -> None:
        if defn.name in self._runners:
            raise ValueError(f"projector {defn.name} already registered")
        for q in [defn.name, *defn.queries]:
            if q in self._queries:
                raise ValueError(f"query {q} already registered")
        runner = _Runner(defn)
        if defn.mode is not Mode.ON_DEMAND:
            runner.projection = project(self._source_streams(defn), defn, schema=self.schema)
        self._runners[defn.name] = runner
        self._queries[defn.name] = (defn.name, None)
        for q, fn in defn.queries.items():
            self._queries[q] = (defn.name, fn)

    @property
    def projector_names(self) -> list[str]:
        return list(self._runners)

    @property
    def query_names(self) -> list[str]:
        return list(self._queries)

    def _runner(self, name: str) -> _Runner:
        try:
            return self._runners[name]
        except KeyError:
            raise UnknownProjector(name) from None

    def _source_streams(self, defn: ProjectorDefinition, only: Iterable[str] | None = None,
                        include_archived: bool = False) -> list[EventStream]:
        out = []
        wanted = set(only) if only is not None else None
        for sid in self.store.stream_ids():
            st = self.store.stream(sid)
            if not defn.selects(st) or (wanted is not None and sid not in wanted):
                continue
            if include_archived and st.archives:
                st = replace(st, entries=tuple(self.store.read_stitched(sid)), archived_before=1)
            out.append(st)
        return out

    def _selected_ids(self, defn: ProjectorDefinition) -> list[str]:
        return [sid for sid in self.store.stream_ids()
                if defn.selects(EventStream(sid, (), self.store.stream_type(sid)))]

    def projection(self, name: str) -> Projection:
        return self._runner(name).projection

    # -- write path ------------------------------------------------------------

    def _aggregate_for(self, command: Command) -> AggregateDefinition:
        try:
            return self._by_command[command.command_type]
        except KeyError:
            raise UnknownCommandType(f"no aggregate handles {command.command_type}") from None

    def load_aggregate(self, aggregate: str, stream_id: str) -> Projection:
        """Fold an aggregate's stream, starting from its snapshot when one exists."""
        defn = self._aggregates[aggregate]
        if stream_id not in self.store:
            return fold_aggregate((), defn, stream_id=stream_id)
        snap = self._snapshots.get((aggregate, stream_id))
        if snap is not None:
            entries = self.store.read(stream_id, snap.sequence + 1)
            return fold_aggregate(entries, defn, copy.deepcopy(snap.state), snap.sequence, stream_id)
        return fold_aggregate(self.store.read(stream_id, 1), defn, stream_id=stream_id)

    def decide(self, command: Command) -> Decision:
        agg = self._aggregate_for(command)
        sid = command.target_stream
        proj = self.load_aggregate(agg.name, sid)
        current = self.store.next_sequence(sid) if sid in self.store else 1
        expected = command.expected_sequence if command.expected_sequence is not None else current
        return Decision(command, agg, expected, proj, accept(proj, command, agg.accept))

    def commit(self, decision: Decision) -> CommandResult:
        command = decision.command
        if isinstance(decision.outcome, Rejection):
            return CommandResult(command, rejection=decision.outcome)
        events = decision.outcome
        if not events:
            return CommandResult(command)
        sid = command.target_stream
        agg = decision.aggregate
        if sid not in self.store:
            if decision.expected_sequence != 1:
                return CommandResult(command, conflict=ConcurrencyConflict(sid, 1, decision.expected_sequence))
            try:
                self.store.create_stream(sid, agg.stream_type)
            except DuplicateStream:
                pass
        with self.store.locked([sid]):
            nxt = self.store.next_sequence(sid)
            if decision.expected_sequence != nxt:
                return CommandResult(command, conflict=ConcurrencyConflict(sid, nxt, decision.expected_sequence))
            new = [SequencedEvent(ev, nxt + i) for i, ev in enumerate(events)]
            stream = EventStream(sid, tuple(new), self.store.stream_type(sid))
            # fold synchronous projections before the append so a failing fold aborts the write
            staged: dict[str, Projection] = {}
            for name, runner in self._runners.items():
                if runner.defn.mode is Mode.SYNCHRONOUS and runner.defn.selects(stream) and runner.projection.valid:
                    staged[name] = project([stream], runner.defn, runner.projection, schema=self.schema)
            self._tx.current = (sid, staged)
            try:
                appended = self.store.append(sid, decision.expected_sequence, events)
            except ConcurrencyConflict as exc:
                return CommandResult(command, conflict=exc)
            finally:
                self._tx.current = None
            self._maybe_snapshot(agg, sid, decision.projection, appended)
        return CommandResult(command, appended=tuple(appended))

    def handle_command(self, command: Command) -> CommandResult:
        """Read, fold, accept, append. Never retries on conflict."""
        return self.commit(self.decide(command))

    def _maybe_snapshot(self, agg: AggregateDefinition, sid: str, before: Projection,
                        appended: list[SequencedEvent]) -> None:
        k = agg.snapshot_interval
        if not k:
            return
        old_len = appended[0].sequence - 1
        new_len = appended[-1].sequence
        if old_len // k == new_len // k:
            return
        state = copy.deepcopy(before.state)
        for entry in appended:
            state = agg.fold(state, entry.event)
        self._snapshots[(agg.name, sid)] = Snapshot(agg.name, sid, state, new_len)

    def snapshot(self, aggregate: str, stream_id: str) -> Snapshot:
        defn = self._aggregates[aggregate]
        entries = self.store.read(stream_id, 1) if stream_id in self.store else []
        proj = fold_aggregate(entries, defn, stream_id=stream_id)
        snap = Snapshot(aggregate, stream_id, proj.state, proj.checkpoint.get(stream_id, 0))
        self._snapshots[(aggregate, stream_id)] = snap
        return snap

    def get_snapshot(self, aggregate: str, stream_id: str) -> Snapshot | None:
        return self._snapshots.get((aggregate, stream_id))

    def load_from_snapshot(self, aggregate: str, stream_id: str) -> Projection:
        return self.load_aggregate(aggregate, stream_id)

    # -- notifications ---------------------------------------------------------

    def _on_append(self, stream_id: str, entries: list[SequencedEvent]) -> None:
        stream = EventStream(stream_id, tuple(entries), self.store.stream_type(stream_id))
        tx = getattr(self._tx, "current", None)
        if tx is not None and tx[0] != stream_id:
            tx = None
        for name, runner in self._runners.items():
            defn = runner.defn
            if not defn.selects(stream):
                continue
            with runner.lock:
                if defn.mode is Mode.SYNCHRONOUS:
                    if tx is not None and name in tx[1]:
                        runner.projection = tx[1][name]
                    elif runner.projection.valid:
                        try:
                            runner.projection = project([stream], defn, runner.projection,
                                                        schema=self.schema)
                        except Exception:
                            runner.set_invalid(stream_id)
                elif defn.mode is Mode.PRE_BUILT:
                    runner.pending.extend((stream_id, e) for e in entries)
        if self.auto_deliver:
            self.quiesce()

    def _on_mutation(self, record: MutationRecord) -> None:
        if record.kind == "archive":
            return  # sequences are unchanged; checkpoints stay meaningful
        sid = record.stream_id
        for runner in self._runners.values():
            with runner.lock:
                covered = sid in runner.projection.checkpoint or any(p[0] == sid for p in runner.pending)
                if covered:
                    runner.set_invalid(sid)
        for key, snap in list(self._snapshots.items()):
            if snap.stream_id == sid and record.position <= snap.sequence:
                del self._snapshots[key]

    def pending(self, projector: str) -> int:
        return len(self._runner(projector).pending)

    def windows(self) -> dict[str, int]:
        """Undelivered events per non-on-demand projector."""
        return {n: len(r.pending) for n, r in self._runners.items() if r.defn.mode is not Mode.ON_DEMAND}

    def deliver(self, projector: str, k: int | None = None) -> int:
        """Fold up to ``k`` pending notifications (all if None) into a pre-built projection."""
        runner = self._runner(projector)
        n = 0
        with runner.lock:
            while runner.pending and (k is None or n < k):
                sid, entry = runner.pending.popleft()
                n += 1
                proj = runner.projection
                if not proj.valid:
                    continue
                done = proj.checkpoint.get(sid, 0)
                if entry.sequence <= done:
                    continue
                if entry.sequence != done + 1 and not (done == 0 and self._first_live(sid) == entry.sequence):
                    runner.set_invalid(sid)
                    continue
                one = EventStream(sid, (entry,), self.store.stream_type(sid))
                runner.projection = project([one], runner.defn, proj, schema=self.schema)
        return n

    def _first_live(self, sid: str) -> int:
        return self.store.archived_before(sid)

    def quiesce(self) -> int:
        return sum(self.deliver(name) for name, r in self._runners.items() if r.pending)

    # -- read path ---------------------------------------------------------------

    def handle_query(self, query: str, params: Mapping[str, Any] | None = None) -> QueryResult:
        try:
            name, fn = self._queries[query]
        except KeyError:
            raise UnknownQuery(query) from None
        runner = self._runners[name]
        defn = runner.defn
        params = dict(params or {})
        if defn.mode is Mode.ON_DEMAND:
            proj = project(self._source_streams(defn), defn, schema=self.schema)
        else:
            with runner.lock:
                proj = runner.projection
            if not proj.valid:
                raise InvalidProjection(
                    f"projection {name} was invalidated by a mutation of "
                    f"{', '.join(sorted(runner.stale))}; rebuild it")
        value = proj.state if fn is None else fn(proj.state, params)
        lag = {}
        for sid in self._selected_ids(defn):
            length = self.store.next_sequence(sid) - 1
            behind = length - proj.checkpoint.get(sid, self.store.archived_before(sid) - 1)
            if behind:
                lag[sid] = behind
        return QueryResult(query, value, dict(proj.checkpoint), defn.mode, lag)

    def rebuild(self, projector: str, streams: Iterable[str] | None = None, *,
                include_archived: bool = False) -> Projection:
        """Recompute a projection from sequence 1 over all (or only the named) source streams."""
        runner = self._runner(projector)
        defn = runner.defn
        scope = None if streams is None else tuple(sorted(set(streams)))
        t0 = time.perf_counter()
        with runner.lock:
            if scope is None:
                proj = project(self._source_streams(defn, include_archived=include_archived), defn,
                               schema=self.schema)
                runner.stale.clear()
                events = proj.processed
            else:
                if defn.combine is None:
                    raise TargetedRebuildUnsupported(
                        f"projector {projector} has no combine function; targeted rebuilds need one")
                old = runner.projection
                partials = {s: v for s, v in (old.partials or {}).items() if s not in scope}
                checkpoint = {s: v for s, v in old.checkpoint.items() if s not in scope}
                fresh = project(self._source_streams(defn, scope, include_archived), defn, schema=self.schema)
                partials.update(fresh.partials or {})
                checkpoint.update(fresh.checkpoint)
                runner.stale.difference_update(scope)
                state = defn.combine([partials[s] for s in sorted(partials)])
                proj = Projection(defn.name, state, checkpoint, not runner.stale, partials,
                                  old.processed + fresh.processed)
                events = fresh.processed
            if defn.mode is not Mode.ON_DEMAND:
                runner.projection = proj
                runner.pending = deque(
                    p for p in runner.pending if p[1].sequence > proj.checkpoint.get(p[0], 0))
        self.rebuild_stats.append(RebuildStats(projector, scope, events, time.perf_counter() - t0))
        return proj
