"""Built-in license domain and generic projectors.

Used by the CLI (``rebuild``, ``simulate``) and handy in tests. The domain
follows the familiar streaming-licence example: one stream per licence,
created once and optionally revoked.
"""

from __future__ import annotations

from typing import Any

from .cqrs import (
    AggregateDefinition,
    Command,
    EventSourcedSystem,
    Mode,
    ProjectorDefinition,
    Rejection,
)
from .events import Event
from .schema import EventSchema, FieldSpec, OrderingRule, StoreSchema, StreamSchema
from .store import EventStore

LICENSE_CREATED = EventSchema("LicenseCreated", 1, (
    FieldSpec("customerId", "string"),
    FieldSpec("titleId", "string"),
    FieldSpec("date", "string"),
))
LICENSE_REVOKED = EventSchema("LicenseRevoked", 1, (FieldSpec("reason", "string", required=False),))

LICENSE_SCHEMA = StoreSchema("licenses", 1, (
    StreamSchema("license", (LICENSE_CREATED, LICENSE_REVOKED), (
        OrderingRule("initial", "LicenseCreated"),
        OrderingRule("at_most_once", "LicenseCreated"),
        OrderingRule("precedes", "LicenseCreated", "LicenseRevoked"),
        OrderingRule("at_most_once", "LicenseRevoked"),
    )),
))


def _license_fold(state: dict, event: Event) -> dict:
    if event.event_type == "LicenseCreated":
        return {**state, "exists": True, "customerId": event.payload.get("customerId"),
                "titleId": event.payload.get("titleId"), "revoked": False}
    if event.event_type == "LicenseRevoked":
        return {**state, "revoked": True}
    return state


def _license_accept(state: dict, command: Command) -> list[Event] | Rejection:
    p = command.payload
    if command.command_type == "CreateLicense":
        if state.get("exists"):
            return Rejection("duplicate", f"license {command.target_stream} already exists")
        missing = [k for k in ("customerId", "titleId", "date") if k not in p]
        if missing:
            return Rejection("invalid", f"missing {', '.join(missing)}")
        return [Event("LicenseCreated", {"customerId": p["customerId"], "titleId": p["titleId"],
                                         "date": p["date"]})]
    if command.command_type == "RevokeLicense":
        if not state.get("exists"):
            return Rejection("not_found", f"license {command.target_stream} does not exist")
        if state.get("revoked"):
            return Rejection("revoked", f"license {command.target_stream} already revoked")
        payload = {"reason": p["reason"]} if "reason" in p else {}
        return [Event("LicenseRevoked", payload)]
    return Rejection("unsupported", command.command_type)


def license_aggregate(snapshot_interval: int | None = None) -> AggregateDefinition:
    return AggregateDefinition("license", ("CreateLicense", "RevokeLicense"), {},
                               _license_fold, _license_accept, snapshot_interval, "license")


def count_projector(name: str = "event-count", mode: Mode = Mode.PRE_BUILT, **kw: Any) -> ProjectorDefinition:
    return ProjectorDefinition(name, 0, lambda n, _sid, _ev: n + 1, mode, combine=sum, **kw)


def _merge_counts(parts: list[dict]) -> dict:
    out: dict[str, int] = {}
    for part in parts:
        for k, v in part.items():
            out[k] = out.get(k, 0) + v
    return dict(sorted(out.items()))


def type_count_projector(name: str = "type-count", mode: Mode = Mode.PRE_BUILT, **kw: Any) -> ProjectorDefinition:
    def fold(counts: dict, _sid: str, ev: Event) -> dict:
        return {**counts, ev.event_type: counts.get(ev.event_type, 0) + 1}

    return ProjectorDefinition(name, {}, fold, mode, combine=_merge_counts, **kw)


def _licenses_fold(state: dict, sid: str, ev: Event) -> dict:
    if ev.event_type == "LicenseCreated":
        return {**state, sid: {"customerId": ev.payload.get("customerId"),
                               "titleId": ev.payload.get("titleId")}}
    if ev.event_type == "LicenseRevoked":
        return {k: v for k, v in state.items() if k != sid}
    return state


def _merge_maps(parts: list[dict]) -> dict:
    out: dict = {}
    for part in parts:
        out.update(part)
    return dict(sorted(out.items()))


def licenses_projector(name: str = "licenses", mode: Mode = Mode.PRE_BUILT) -> ProjectorDefinition:
    prefix = "" if name == "licenses" else f"{name}:"
    return ProjectorDefinition(
        name, {}, _licenses_fold, mode, stream_type="license", combine=_merge_maps,
        queries={
            f"{prefix}active-licenses": lambda s, _p: len(s),
            f"{prefix}license": lambda s, p: s.get(p.get("stream")),
        })


GENERIC_PROJECTORS = {
    "event-count": count_projector,
    "type-count": type_count_projector,
}


def license_system(store: EventStore, *, snapshot_interval: int | None = None,
                   auto_deliver: bool = False) -> EventSourcedSystem:
    """The license aggregate with one projector per mode."""
    return EventSourcedSystem(
        store,
        [license_aggregate(snapshot_interval)],
        [
            licenses_projector("licenses", Mode.PRE_BUILT),
            licenses_projector("licenses-sync", Mode.SYNCHRONOUS),
            licenses_projector("licenses-live", Mode.ON_DEMAND),
            count_projector("event-count", Mode.PRE_BUILT),
            type_count_projector("type-count", Mode.PRE_BUILT),
        ],
        schema=LICENSE_SCHEMA,
        auto_deliver=auto_deliver,
    )
