"""Line-oriented JSON codec shared by logs, schema documents, plans and scripts.

A log record is one canonical single-line JSON object::

    {"seq":1,"type":"LicenseCreated","v":1,"payload":{...},"meta":{}}

Keys appear in exactly that order, compact separators, UTF-8, LF-terminated.
Decoding insists on the canonical form, so a record has exactly one valid
byte representation.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterator

from .errors import MalformedRecord, UnknownFormatVersion
from .events import Event, SequencedEvent

FORMAT_VERSION = 1
RECORD_KEYS = ("seq", "type", "v", "payload", "meta")


def dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out = dict(pairs)
    if len(out) != len(pairs):
        raise ValueError("duplicate key")
    return out


def loads(text: str | bytes) -> Any:
    return json.loads(text, object_pairs_hook=_no_duplicates)


def event_envelope(event: Event) -> dict[str, Any]:
    return {"type": event.event_type, "v": event.schema_version,
            "payload": event.payload, "meta": event.metadata}


def encode_record(entry: SequencedEvent) -> bytes:
    ev = entry.event
    obj = {"seq": entry.sequence, "type": ev.event_type, "v": ev.schema_version,
           "payload": ev.payload, "meta": ev.metadata}
    return (dumps(obj) + "\n").encode("utf-8")


def decode_record(line: bytes, line_no: int = 1, offset: int = 0) -> SequencedEvent:
    """Decode one LF-terminated record line.

    Raises MalformedRecord carrying ``line_no``/``offset`` for anything that
    is not the canonical encoding of a valid record, including a line with no
    terminator (a torn write).
    """
    if not line.endswith(b"\n"):
        raise MalformedRecord("missing line terminator (torn write)", line_no, offset)
    try:
        obj = loads(line[:-1].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedRecord(f"not valid JSON: {exc}", line_no, offset) from None
    if not isinstance(obj, dict) or tuple(obj) != RECORD_KEYS:
        raise MalformedRecord(f"keys must be exactly {list(RECORD_KEYS)}", line_no, offset)
    try:
        entry = SequencedEvent(
            Event(obj["type"], obj["payload"], obj["v"], obj["meta"]), obj["seq"])
    except (ValueError, TypeError) as exc:
        raise MalformedRecord(str(exc), line_no, offset) from None
    if encode_record(entry) != line:
        raise MalformedRecord("record is not in canonical form", line_no, offset)
    return entry


def split_lines(data: bytes) -> Iterator[tuple[int, int, bytes]]:
    """Yield ``(line_no, byte_offset, line)``; lines keep their LF, a torn tail has none."""
    offset = 0
    line_no = 1
    n = len(data)
    while offset < n:
        end = data.find(b"\n", offset)
        stop = n if end < 0 else end + 1
        yield line_no, offset, data[offset:stop]
        offset = stop
        line_no += 1


def scan_log(data: bytes) -> tuple[list[SequencedEvent], MalformedRecord | None, int]:
    """Decode records until the first bad line.

    Returns the valid prefix, the first error (or None) and the byte length of
    the valid prefix.
    """
    entries: list[SequencedEvent] = []
    good = 0
    for line_no, offset, line in split_lines(data):
        try:
            entries.append(decode_record(line, line_no, offset))
        except MalformedRecord as exc:
            return entries, exc, good
        good = offset + len(line)
    return entries, None, good


def encode_entries(entries) -> bytes:
    return b"".join(encode_record(e) for e in entries)


# -- documents: header line + one entity per line -----------------------------


def dump_document(kind: str, header: dict[str, Any], entities: list[dict[str, Any]]) -> str:
    head = {"kind": kind, "format": FORMAT_VERSION, **header}
    return "".join(dumps(obj) + "\n" for obj in [head, *entities])


def load_document(text: str, kind: str) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    objs = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        try:
            obj = loads(raw)
        except ValueError as exc:
            raise MalformedRecord(f"not valid JSON: {exc}", line_no, 0) from None
        if not isinstance(obj, dict):
            raise MalformedRecord("each line must be a JSON object", line_no, 0)
        objs.append(obj)
    if not objs or objs[0].get("kind") != kind:
        raise MalformedRecord(f"document must start with a {kind!r} header", 1, 0)
    head = objs[0]
    if head.get("format") != FORMAT_VERSION:
        raise UnknownFormatVersion(f"unsupported {kind} format version: {head.get('format')!r}")
    return head, objs[1:]


def read_document(path: str | Path, kind: str) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    return load_document(Path(path).read_text(encoding="utf-8"), kind)
