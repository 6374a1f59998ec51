"""Deterministic simulation of the inconsistency window.

A script is a list of steps run against an :class:`EventSourcedSystem`.
Notification delivery to pre-built projectors is an explicit step, so the
window between a command's append and its effect on a projection is measured
in undelivered events rather than wall-clock time. The seed only decides the
commit order of ``race`` steps and the size of ``deliver`` steps that leave
``k`` unset; the same seed and script always give the same trace.

Step forms (one JSON object per line in script files)::

    {"op": "command", "type": "CreateLicense", "stream": "l-1", "payload": {...}, "expect": 1}
    {"op": "query", "name": "licenses", "params": {}}
    {"op": "deliver", "projector": "licenses", "k": 1}
    {"op": "quiesce"}
    {"op": "race", "commands": [{...}, {...}]}
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .cqrs import Command, CommandResult, EventSourcedSystem, Mode
from .errors import InvalidProjection, UnknownScriptTarget
from .records import dump_document, dumps, load_document

OPS = ("command", "query", "deliver", "quiesce", "race")


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(_jsonable(v) for v in value)
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return repr(value)


@dataclass
class SimulatedSchedule:
    seed: int = 0
    step: int = 0
    rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)


@dataclass
class Trace:
    seed: int
    entries: list[dict[str, Any]] = field(default_factory=list)

    def to_text(self) -> str:
        return "".join(dumps(e) + "\n" for e in self.entries)

    def results(self, op: str) -> list[dict[str, Any]]:
        return [e for e in self.entries if e["op"] == op]

    @property
    def max_window(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            for name, w in e["windows"].items():
                out[name] = max(out.get(name, 0), w)
        return out


def _command(step: dict) -> Command:
    return Command(step["type"], step["stream"], dict(step.get("payload") or {}), step.get("expect"))


def validate_script(system: EventSourcedSystem, script: Iterable[dict]) -> list[dict]:
    steps = list(script)
    projectors = set(system.projector_names)
    queries = set(system.query_names)
    for i, step in enumerate(steps):
        op = step.get("op")
        if op not in OPS:
            raise ValueError(f"step {i}: unknown op {op!r}")
        cmds = [step] if op == "command" else step.get("commands", []) if op == "race" else []
        for c in cmds:
            if c.get("type") not in system._by_command:
                raise UnknownScriptTarget(f"step {i}: no aggregate handles command {c.get('type')!r}")
        if op == "query" and step.get("name") not in queries:
            raise UnknownScriptTarget(f"step {i}: unknown query {step.get('name')!r}")
        if op == "deliver" and step.get("projector") not in projectors:
            raise UnknownScriptTarget(f"step {i}: unknown projector {step.get('projector')!r}")
    return steps


def _result_entry(result: CommandResult) -> dict:
    return result.to_json()


def run_script(system: EventSourcedSystem, script: Iterable[dict], seed: int = 0) -> Trace:
    steps = validate_script(system, script)
    sched = SimulatedSchedule(seed)
    trace = Trace(seed)
    for step in steps:
        op = step["op"]
        entry: dict[str, Any] = {"step": sched.step, "op": op}
        if op == "command":
            entry["result"] = _result_entry(system.handle_command(_command(step)))
        elif op == "race":
            # every contender reads the same state before anyone appends
            decisions = [system.decide(_command(c)) for c in step["commands"]]
            order = list(range(len(decisions)))
            sched.rng.shuffle(order)
            results: list[Any] = [None] * len(decisions)
            for i in order:
                results[i] = _result_entry(system.commit(decisions[i]))
            entry["order"] = order
            entry["results"] = results
        elif op == "query":
            try:
                res = system.handle_query(step["name"], step.get("params"))
                entry["result"] = {"value": _jsonable(res.value), "checkpoint": res.checkpoint,
                                   "lag": res.window, "mode": res.mode.value}
            except InvalidProjection as exc:
                entry["result"] = {"error": "invalid_projection", "message": str(exc)}
        elif op == "deliver":
            k = step.get("k")
            if k is None:
                k = sched.rng.randint(0, system.pending(step["projector"]))
            entry["delivered"] = system.deliver(step["projector"], k)
        elif op == "quiesce":
            entry["delivered"] = system.quiesce()
        entry["windows"] = system.windows()
        trace.entries.append(entry)
        sched.step += 1
    return trace


def quiescent_mismatches(system: EventSourcedSystem) -> list[str]:
    """Pre-built projectors whose state differs from a fresh on-demand fold."""
    from .cqrs import project

    bad = []
    for name in system.projector_names:
        runner = system._runners[name]
        if runner.defn.mode is Mode.ON_DEMAND or not runner.projection.valid:
            continue
        fresh = project(system._source_streams(runner.defn), runner.defn, schema=system.schema)
        if fresh.state != runner.projection.state or fresh.checkpoint != runner.projection.checkpoint:
            bad.append(name)
    return bad


def dump_script(steps: Iterable[dict]) -> str:
    return dump_document("script", {}, list(steps))


def load_script(text: str) -> list[dict]:
    _, steps = load_document(text, "script")
    return steps


def read_script(path: str | Path) -> list[dict]:
    return load_script(Path(path).read_text(encoding="utf-8"))
