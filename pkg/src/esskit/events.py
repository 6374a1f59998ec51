"""Events and sequenced events."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

EVENT_TYPE_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
NAME_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_.\-]*")


def check_name(value: str, what: str = "name") -> str:
    if not isinstance(value, str) or not NAME_RE.fullmatch(value) or ".." in value:
        raise ValueError(f"invalid {what}: {value!r}")
    return value


def _check_value(value: Any, path: str) -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"{path}: non-finite number")
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            _check_value(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise ValueError(f"{path}: map keys must be strings")
            _check_value(item, f"{path}.{key}")
        return
    raise ValueError(f"{path}: unsupported value type {type(value).__name__}")


@dataclass(frozen=True)
class Event:
    """One state change, in domain terms.

    ``payload`` keeps insertion order; the on-disk form relies on it.
    ``metadata`` never takes part in ordering or schema conformance.
    """

    event_type: str
    payload: dict[str, Any] = field(default_factory=dict)
    schema_version: int = 1
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.event_type, str) or not EVENT_TYPE_RE.fullmatch(self.event_type):
            raise ValueError(f"invalid event type: {self.event_type!r}")
        if isinstance(self.schema_version, bool) or not isinstance(self.schema_version, int) or self.schema_version < 1:
            raise ValueError(f"schema_version must be a positive integer, got {self.schema_version!r}")
        if not isinstance(self.payload, Mapping):
            raise ValueError("payload must be a mapping")
        if not isinstance(self.metadata, Mapping):
            raise ValueError("metadata must be a mapping")
        _check_value(self.payload, "payload")
        _check_value(self.metadata, "meta")
        # shallow copies so later edits to the caller's dicts do not leak in
        object.__setattr__(self, "payload", dict(self.payload))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def with_payload(self, payload: Mapping[str, Any], *, version: int | None = None,
                     event_type: str | None = None) -> Event:
        return Event(
            event_type=self.event_type if event_type is None else event_type,
            payload=dict(payload),
            schema_version=self.schema_version if version is None else version,
            metadata=self.metadata,
        )


@dataclass(frozen=True)
class SequencedEvent:
    event: Event
    sequence: int

    def __post_init__(self) -> None:
        if isinstance(self.sequence, bool) or not isinstance(self.sequence, int) or self.sequence < 1:
            raise ValueError(f"sequence must be >= 1, got {self.sequence!r}")

    @property
    def event_type(self) -> str:
        return self.event.event_type
