"""Command-line interface.

Exit codes: 0 success, 1 domain rejection or violation, 2 usage error,
3 corrupt or unreadable store.
"""

from __future__ import annotations

import argparse
import importlib
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import errors
from .cqrs import EventSourcedSystem, Mode
from .demo import count_projector, licenses_projector, license_system, type_count_projector
from .events import Event
from .evolution import (
    Technique,
    archive_cold,
    check_versioned_events,
    copy_transform,
    in_place_transform,
    read_plan,
    weak_read,
)
from .harness import read_script, run_script
from .records import dumps, encode_record, loads
from .schema import conforms_store, conforms_stream, dump_store_schema, load_store_schema
from .storage import SCHEMA_FILE, init_store, open_store, store_lock, store_size, write_manifest
from .store import Degree, EventStore, ImmutabilityPolicy

EXIT_OK, EXIT_REJECTED, EXIT_USAGE, EXIT_CORRUPT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Output:
    def __init__(self, structured: bool, stream=None) -> None:
        self.structured = structured
        self.stream = stream or sys.stdout

    def emit(self, obj: dict[str, Any], text: str | None = None) -> None:
        if self.structured:
            print(dumps(obj), file=self.stream)
        elif text is not None:
            print(text, file=self.stream)


def _store_path(args) -> Path:
    if not args.store:
        raise UsageError("--store is required")
    return Path(args.store)


def _open(args) -> EventStore:
    return open_store(_store_path(args), repair=args.repair)


def _parse_events(spec: str) -> list[Event]:
    path = Path(spec)
    text = path.read_text(encoding="utf-8") if not spec.lstrip().startswith("{") and path.exists() else spec
    events = []
    for raw in text.splitlines() or [text]:
        if not raw.strip():
            continue
        try:
            obj = loads(raw)
            events.append(Event(obj["type"], obj.get("payload", {}), obj.get("v", 1), obj.get("meta", {})))
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad event {raw!r}: {exc}") from None
    if not events:
        raise UsageError("no events given")
    return events


def _load_factory(spec: str) -> Callable[[EventStore], EventSourcedSystem]:
    module, _, attr = spec.partition(":")
    if not attr:
        raise UsageError("--system expects module:factory")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise UsageError(f"cannot load {spec}: {exc}") from None


# -- subcommands --------------------------------------------------------------------


def cmd_init(args, out: Output) -> int:
    schema = None
    if args.schema:
        schema = load_store_schema(Path(args.schema).read_text(encoding="utf-8"))
    policy = ImmutabilityPolicy(Degree.parse(args.policy), archive_exempt=args.archive_exempt)
    store = init_store(args.path, args.store_id, policy, schema)
    out.emit({"store": store.store_id, "path": str(args.path), "policy": policy.degree.value},
             f"initialized store {store.store_id} at {args.path} (policy {policy.degree.value})")
    store.close()
    return EXIT_OK


def cmd_append(args, out: Output) -> int:
    events = _parse_events(args.event)
    root = _store_path(args)
    with store_lock(root):
        store = _open(args)
        try:
            if args.stream not in store:
                store.create_stream(args.stream, args.type)
            elif args.type and store.stream_type(args.stream) is None:
                store.assign_stream_type(args.stream, args.type)
            appended = store.append(args.stream, args.expect, events)
        finally:
            store.close()
    seqs = [e.sequence for e in appended]
    out.emit({"stream": args.stream, "sequences": seqs},
             f"appended {len(seqs)} event(s) to {args.stream} at {seqs[0]}..{seqs[-1]}")
    return EXIT_OK


def cmd_read(args, out: Output) -> int:
    store = _open(args)
    if args.stitched:
        entries = store.read_stitched(args.stream, args.from_)
    else:
        if args.stream not in store:
            raise errors.UnknownStream(args.stream)
        entries = store.read(args.stream, args.from_)
    if args.plan:
        plan = read_plan(args.plan)
        entries = plan.upcasting().iter_entries(entries)
    for entry in entries:
        sys.stdout.write(encode_record(entry).decode("utf-8"))
    return EXIT_OK


def cmd_streams(args, out: Output) -> int:
    store = _open(args)
    for sid in store.stream_ids():
        st = store.stream(sid)
        out.emit({"stream": sid, "type": st.stream_type, "length": st.length,
                  "archived_before": st.archived_before},
                 f"{sid}\t{st.stream_type or '-'}\t{st.length}")
    return EXIT_OK


def compute_stats(store: EventStore, root: Path | None = None) -> dict[str, Any]:
    types: dict[str, int] = {}
    live = 0
    archived = 0
    for sid in store.stream_ids():
        st = store.stream(sid)
        live += len(st.entries)
        archived += st.archived_before - 1
        for e in st.entries:
            types[e.event_type] = types.get(e.event_type, 0) + 1
    return {"streams": len(store.stream_ids()), "events": live, "archived_events": archived,
            "bytes": store_size(root) if root is not None else None,
            "types": dict(sorted(types.items()))}


def cmd_stats(args, out: Output) -> int:
    store = _open(args)
    stats = compute_stats(store, _store_path(args))
    lines = [f"streams: {stats['streams']}", f"events: {stats['events']}",
             f"archived events: {stats['archived_events']}", f"bytes: {stats['bytes']}"]
    lines += [f"type {t}: {n}" for t, n in stats["types"].items()]
    out.emit(stats, "\n".join(lines))
    return EXIT_OK


def cmd_validate(args, out: Output) -> int:
    store = _open(args)
    if args.schema:
        schema = load_store_schema(Path(args.schema).read_text(encoding="utf-8"))
    elif store.bound_schema is not None:
        schema = store.bound_schema
    else:
        raise UsageError("no --schema given and the store has no bound schema")
    result = conforms_store(store, schema)
    for v in result.violations:
        rule = f" rule {v.rule}" if v.rule else ""
        out.emit({"violation": v.to_json()}, f"stream {v.stream_id} seq {v.sequence}{rule}: {v.message}")
    out.emit({"conforms": result.ok, "violations": len(result.violations)},
             f"conforms: {'true' if result.ok else 'false'}")
    return EXIT_OK if result.ok else EXIT_REJECTED


def _bind_schema(root: Path, store: EventStore, schema) -> None:
    (root / SCHEMA_FILE).write_text(dump_store_schema(schema), encoding="utf-8")
    store.bound_schema = schema
    write_manifest(root, store)


def _emit_report(out: Output, report) -> None:
    for line in report.to_lines():
        if line["kind"] == "migration_report":
            text = (f"{line['technique']}{' (dry run)' if line['dry_run'] else ''}: "
                    f"{line['streams']} stream(s), {line['mutations']} mutation(s)")
            if line["target_store_id"]:
                text += f", target {line['target_store_id']}"
        else:
            text = (f"  {line['stream']}: {line['events_in']} -> {line['events_out']} events, "
                    f"{line['mutations']} mutation(s)" + (f", backup {line['backup']}" if line["backup"] else ""))
        out.emit(line, text)
    for v in report.violations:
        out.emit({"violation": v}, f"  violation: {v}")


def cmd_migrate(args, out: Output) -> int:
    plan = read_plan(args.plan)
    root = _store_path(args)
    with store_lock(root):
        store = _open(args)
        try:
            problems = plan.check_references(store.bound_schema)
            if problems:
                raise UsageError("; ".join(problems))
            return _migrate(args, out, plan, root, store)
        finally:
            store.close()


def _migrate(args, out: Output, plan, root: Path, store: EventStore) -> int:
    technique = plan.technique
    if technique is Technique.VERSIONED_EVENTS:
        if store.bound_schema is None or plan.target_schema is None:
            raise UsageError("versioned_events needs a bound store schema and a plan target_schema")
        verdict = check_versioned_events(store.bound_schema, plan.target_schema)
        ok = bool(verdict)
        out.emit({"technique": technique.value, "compatible": ok,
                  "reason": None if ok else verdict.reason, "dry_run": args.dry_run},
                 "compatible" if ok else f"incompatible: {verdict.reason}")
        if ok and not args.dry_run:
            _bind_schema(root, store, plan.target_schema)
        return EXIT_OK if ok else EXIT_REJECTED
    if technique is Technique.WEAK_SCHEMA:
        if plan.target_schema is None:
            raise UsageError("weak_schema needs a plan target_schema")
        failures = 0
        for sid in store.stream_ids():
            ss = plan.target_schema.stream_schema(store.stream_type(sid) or "")
            for entry in store.read(sid, 1):
                candidates = [] if ss is None else sorted(
                    (es for es in ss.event_schemas if es.event_type == entry.event_type),
                    key=lambda es: es.version)
                try:
                    if not candidates:
                        raise errors.ToleranceExceeded(f"no schema for {entry.event_type}")
                    weak_read(encode_record(entry), candidates[-1])
                except errors.ToleranceExceeded as exc:
                    failures += 1
                    out.emit({"stream": sid, "seq": entry.sequence, "error": str(exc)},
                             f"  {sid} seq {entry.sequence}: {exc}")
        out.emit({"technique": technique.value, "tolerated": failures == 0, "failures": failures},
                 f"weak_schema: {'all events readable' if failures == 0 else f'{failures} event(s) beyond tolerance'}")
        return EXIT_OK if failures == 0 else EXIT_REJECTED
    if technique is Technique.UPCAST:
        upcasting = plan.upcasting(plan.target_schema)
        bad = 0
        total = 0
        for sid in store.stream_ids():
            view = list(upcasting.iter_entries(store.read(sid, 1)))
            total += len(view)
            if plan.target_schema is not None:
                ss = plan.target_schema.stream_schema(store.stream_type(sid) or "")
                res = conforms_stream(view, ss) if ss is not None else None
                if res is None or not res:
                    bad += 1
                    msgs = ["no stream schema"] if res is None else [str(v) for v in res.violations]
                    for m in msgs:
                        out.emit({"stream": sid, "violation": m}, f"  {sid}: {m}")
        out.emit({"technique": technique.value, "events": total, "nonconforming_streams": bad},
                 f"upcast view: {total} event(s), {bad} nonconforming stream(s); store left untouched")
        return EXIT_OK if bad == 0 else EXIT_REJECTED
    if technique is Technique.IN_PLACE:
        report = in_place_transform(store, plan, dry_run=args.dry_run)
        _emit_report(out, report)
        if plan.target_schema is not None and not args.dry_run:
            _bind_schema(root, store, plan.target_schema)
        return EXIT_OK
    if technique is Technique.COPY_TRANSFORM:
        if not args.target and not args.dry_run:
            raise UsageError("copy_transform needs --target PATH")
        target, report = copy_transform(store, plan, target_root=None if args.dry_run else args.target,
                                        dry_run=args.dry_run)
        if target is not None:
            target.close()
        _emit_report(out, report)
        return EXIT_OK
    raise UsageError(f"unsupported technique {technique}")


def _rebuild_system(store: EventStore, factory: str | None) -> EventSourcedSystem:
    if factory:
        return _load_factory(factory)(store)
    return EventSourcedSystem(store, [], [
        count_projector("event-count", Mode.ON_DEMAND),
        type_count_projector("type-count", Mode.ON_DEMAND),
        licenses_projector("licenses", Mode.ON_DEMAND),
    ])


def cmd_rebuild(args, out: Output) -> int:
    store = _open(args)
    system = _rebuild_system(store, args.system)
    if args.projector not in system.projector_names:
        raise UsageError(f"unknown projector {args.projector}; known: {', '.join(system.projector_names)}")
    proj = system.rebuild(args.projector, args.streams or None, include_archived=args.include_archived)
    stats = system.rebuild_stats[-1]
    from .harness import _jsonable

    out.emit({"projector": args.projector, "events": stats.events, "seconds": round(stats.seconds, 6),
              "checkpoint": proj.checkpoint, "state": _jsonable(proj.state)},
             f"rebuilt {args.projector}: {stats.events} events in {stats.seconds:.3f}s")
    return EXIT_OK


def cmd_simulate(args, out: Output) -> int:
    script = read_script(args.script)
    store = _open(args) if args.store else EventStore("simulation", ImmutabilityPolicy(Degree.STRICT))
    system = _load_factory(args.system)(store) if args.system else license_system(store)
    trace = run_script(system, script, seed=args.seed)
    sys.stdout.write(trace.to_text())
    return EXIT_OK


def cmd_archive(args, out: Output) -> int:
    root = _store_path(args)
    with store_lock(root):
        store = _open(args)
        try:
            path = archive_cold(store, args.stream, args.before)
        finally:
            store.close()
    out.emit({"stream": args.stream, "archive": str(path)}, f"archived to {path}")
    return EXIT_OK


# -- wiring ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def shared(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies suppress their defaults so options given before
        # the subcommand name are not overwritten
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        parser = argparse.ArgumentParser(add_help=False)
        parser.add_argument("--store", help="store directory", **kw)
        parser.add_argument("--json", action="store_true", help="one JSON object per output line", **kw)
        parser.add_argument("--repair", action="store_true",
                            help="truncate a torn final record when opening", **kw)
        return parser

    common = shared(False)
    p = argparse.ArgumentParser(prog="esskit", description=__doc__, parents=[common])
    common = shared(True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="create a store")
    s.add_argument("path", type=Path)
    s.add_argument("--policy", choices=["strict", "cut-off", "cut_off", "mutable"], default="strict")
    s.add_argument("--store-id")
    s.add_argument("--schema", help="bind a store schema document")
    s.add_argument("--archive-exempt", action="store_true", help="allow cold archiving on a strict store")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("append", parents=[common], help="append events to a stream")
    s.add_argument("stream")
    s.add_argument("--expect", type=int, required=True, help="expected next sequence (length + 1)")
    s.add_argument("--event", required=True, help="inline JSON event or a file of JSON lines")
    s.add_argument("--type", help="stream type tag for a new stream")
    s.set_defaults(func=cmd_append)

    s = sub.add_parser("read", parents=[common], help="print stream records")
    s.add_argument("stream")
    s.add_argument("--from", dest="from_", type=int, default=1)
    s.add_argument("--stitched", action="store_true", help="include archived events")
    s.add_argument("--plan", help="read through the upcasters compiled from a migration plan")
    s.set_defaults(func=cmd_read)

    s = sub.add_parser("streams", parents=[common], help="list streams")
    s.set_defaults(func=cmd_streams)

    s = sub.add_parser("stats", parents=[common], help="store size figures")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("validate", parents=[common], help="check conformance to a store schema")
    s.add_argument("--schema")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("migrate", parents=[common], help="run a migration plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--dry-run", action="store_true")
    s.add_argument("--target", help="target directory for copy_transform")
    s.set_defaults(func=cmd_migrate)

    s = sub.add_parser("rebuild", parents=[common], help="rebuild a projection")
    s.add_argument("--projector", required=True)
    s.add_argument("--streams", nargs="*")
    s.add_argument("--include-archived", action="store_true")
    s.add_argument("--system", help="module:factory returning an EventSourcedSystem for a store")
    s.set_defaults(func=cmd_rebuild)

    s = sub.add_parser("simulate", parents=[common], help="run a consistency-harness script")
    s.add_argument("--script", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--system", help="module:factory returning an EventSourcedSystem for a store")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("archive", parents=[common], help="move old events to cold storage")
    s.add_argument("stream")
    s.add_argument("--before", type=int, required=True)
    s.set_defaults(func=cmd_archive)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Output(args.json)
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (errors.StoreCorrupt, errors.UnknownFormatVersion, errors.MalformedRecord) as exc:
        print(f"corrupt store: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except errors.ImmutabilityViolation as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_REJECTED
    except (errors.EssError, FileExistsError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_REJECTED
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
