import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esskit import Event, SequencedEvent, decode_record, encode_record
from esskit.errors import MalformedRecord, UnknownFormatVersion
from esskit.records import dump_document, load_document, scan_log

from generators import random_event

GOLDEN = (b'{"seq":1,"type":"LicenseCreated","v":1,"payload":{"customerId":"BlackMirror",'
          b'"titleId":"TheNationalAnthemS01E01","date":"2014-01-06"},"meta":{}}\n')


def license_created() -> SequencedEvent:
    return SequencedEvent(Event("LicenseCreated", {"customerId": "BlackMirror",
                                                   "titleId": "TheNationalAnthemS01E01",
                                                   "date": "2014-01-06"}), 1)


def test_golden_license_record():
    assert encode_record(license_created()) == GOLDEN
    assert decode_record(GOLDEN) == license_created()


def test_payload_key_order_is_kept():
    entry = SequencedEvent(Event("E", {"b": 1, "a": 2}), 3)
    assert encode_record(entry) == b'{"seq":3,"type":"E","v":1,"payload":{"b":1,"a":2},"meta":{}}\n'


def test_non_ascii_is_written_as_utf8():
    line = encode_record(SequencedEvent(Event("E", {"name": "Zoë"}), 1))
    assert "Zoë".encode() in line


json_scalars = st.one_of(st.none(), st.booleans(), st.integers(-2**63, 2**63),
                         st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=8))
json_values = st.recursive(json_scalars, lambda inner: st.one_of(
    st.lists(inner, max_size=3), st.dictionaries(st.text(max_size=5), inner, max_size=3)), max_leaves=8)


@settings(max_examples=300, deadline=None)
@given(etype=st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,10}", fullmatch=True),
       payload=st.dictionaries(st.text(max_size=6), json_values, max_size=4),
       meta=st.dictionaries(st.text(max_size=4), json_scalars, max_size=2),
       version=st.integers(1, 50), seq=st.integers(1, 10**9))
def test_round_trip(etype, payload, meta, version, seq):
    entry = SequencedEvent(Event(etype, payload, version, meta), seq)
    line = encode_record(entry)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert not line[:-1].endswith((b" ", b"\t"))
    back = decode_record(line)
    assert back == entry
    assert encode_record(back) == line


@pytest.mark.parametrize("line,reason", [
    (b'{"seq":1,"type":"E","v":1,"payload":{},"meta":{}}', "terminator"),
    (b'{"type":"E","seq":1,"v":1,"payload":{},"meta":{}}\n', "keys"),
    (b'{"seq":1,"type":"E","v":1,"payload":{},"meta":{},"x":1}\n', "keys"),
    (b'{"seq": 1,"type":"E","v":1,"payload":{},"meta":{}}\n', "canonical"),
    (b'{"seq":0,"type":"E","v":1,"payload":{},"meta":{}}\n', "sequence"),
    (b'{"seq":1,"type":"1E","v":1,"payload":{},"meta":{}}\n', "event type"),
    (b'{"seq":1,"type":"E","v":1,"payload":{"a":1,"a":2},"meta":{}}\n', "JSON"),
    (b'not json\n', "JSON"),
])
def test_malformed_lines(line, reason):
    with pytest.raises(MalformedRecord) as info:
        decode_record(line, 7, 100)
    assert info.value.line == 7 and info.value.offset == 100
    assert reason in str(info.value)


def test_scan_log_keeps_prefix_before_torn_tail():
    rng = random.Random(1)
    entries = [SequencedEvent(random_event(rng), i) for i in range(1, 6)]
    data = b"".join(encode_record(e) for e in entries)
    for cut in range(len(data) + 1):
        got, err, good = scan_log(data[:cut])
        complete = data[:cut].count(b"\n")
        assert got == entries[:complete]
        assert good == len(b"".join(encode_record(e) for e in entries[:complete]))
        assert (err is None) == (cut == good)
        if err is not None:
            assert err.line == complete + 1 and err.offset == good


def test_documents_reject_unknown_format():
    text = dump_document("script", {"a": 1}, [{"op": "quiesce"}])
    head, body = load_document(text, "script")
    assert head["a"] == 1 and body == [{"op": "quiesce"}]
    with pytest.raises(UnknownFormatVersion):
        load_document(text.replace('"format":1', '"format":2'), "script")
    with pytest.raises(MalformedRecord):
        load_document(text, "store_schema")
