import random

import pytest

from esskit import Degree, Event, ImmutabilityPolicy, init_store, open_store
from esskit.demo import LICENSE_SCHEMA
from esskit.errors import StoreCorrupt, UnknownFormatVersion
from esskit.storage import read_manifest, store_lock, store_size

from generators import random_event


def fill(store, rng, n_streams=3, n_batches=10):
    for i in range(n_streams):
        store.create_stream(f"s{i}", rng.choice([None, "t"]))
    for _ in range(n_batches):
        sid = f"s{rng.randrange(n_streams)}"
        store.append(sid, store.next_sequence(sid), [random_event(rng) for _ in range(rng.randint(1, 3))])


def snapshot(store):
    return {sid: (store.read(sid), store.stream_type(sid)) for sid in store.stream_ids()}


def test_fresh_store_is_empty(tmp_path):
    init_store(tmp_path / "db").close()
    store = open_store(tmp_path / "db")
    assert store.stream_ids() == []
    manifest = read_manifest(tmp_path / "db")
    assert manifest["format"] == 1 and manifest["store_id"] == "db"
    assert (tmp_path / "db" / "backups").is_dir() and (tmp_path / "db" / "archive").is_dir()


def test_init_twice_fails(tmp_path):
    init_store(tmp_path / "db").close()
    with pytest.raises(FileExistsError):
        init_store(tmp_path / "db")


def test_reopen_equality(tmp_path):
    rng = random.Random(5)
    store = init_store(tmp_path / "db", policy=ImmutabilityPolicy(Degree.MUTABLE), schema=LICENSE_SCHEMA)
    fill(store, rng)
    store.append("s0", store.next_sequence("s0"), [Event("Extra")])
    store.update_at("s0", 1, Event("Changed", {"x": 1}))
    before = snapshot(store)
    journal = store.journal
    store.close()
    again = open_store(tmp_path / "db")
    assert snapshot(again) == before
    assert again.journal == journal
    assert again.policy.degree is Degree.MUTABLE
    assert again.bound_schema == LICENSE_SCHEMA


def test_log_file_is_record_lines(tmp_path):
    store = init_store(tmp_path / "db")
    store.create_stream("s1")
    store.append("s1", 1, [Event("LicenseCreated", {"customerId": "BlackMirror",
                                                    "titleId": "TheNationalAnthemS01E01",
                                                    "date": "2014-01-06"})])
    assert (tmp_path / "db" / "streams" / "s1.log").read_bytes() == (
        b'{"seq":1,"type":"LicenseCreated","v":1,"payload":{"customerId":"BlackMirror",'
        b'"titleId":"TheNationalAnthemS01E01","date":"2014-01-06"},"meta":{}}\n')


def test_strict_append_prefix_stability(tmp_path):
    rng = random.Random(8)
    store = init_store(tmp_path / "db")
    store.create_stream("s")
    path = tmp_path / "db" / "streams" / "s.log"
    previous = b""
    for _ in range(30):
        store.append("s", store.next_sequence("s"), [random_event(rng)])
        now = path.read_bytes()
        assert now.startswith(previous) and len(now) > len(previous)
        previous = now


def test_gap_is_reported(tmp_path):
    init_store(tmp_path / "db").close()
    (tmp_path / "db" / "streams" / "s.log").write_bytes(
        b'{"seq":1,"type":"E","v":1,"payload":{},"meta":{}}\n'
        b'{"seq":3,"type":"E","v":1,"payload":{},"meta":{}}\n')
    with pytest.raises(StoreCorrupt) as info:
        open_store(tmp_path / "db")
    assert "gap at 2" in str(info.value)
    assert info.value.stream_id == "s" and info.value.position == 2


def test_duplicate_is_reported(tmp_path):
    init_store(tmp_path / "db").close()
    line = b'{"seq":1,"type":"E","v":1,"payload":{},"meta":{}}\n'
    (tmp_path / "db" / "streams" / "s.log").write_bytes(line + line)
    with pytest.raises(StoreCorrupt, match="duplicate"):
        open_store(tmp_path / "db")


def test_unknown_format_version(tmp_path):
    init_store(tmp_path / "db").close()
    meta = tmp_path / "db" / "store.meta"
    meta.write_text(meta.read_text().replace('"format":1', '"format":7'))
    with pytest.raises(UnknownFormatVersion):
        open_store(tmp_path / "db")


def test_truncation_at_every_byte(tmp_path):
    rng = random.Random(2)
    store = init_store(tmp_path / "db", fsync=False)
    store.create_stream("s")
    store.append("s", 1, [random_event(rng) for _ in range(4)])
    entries = store.read("s")
    store.close()
    path = tmp_path / "db" / "streams" / "s.log"
    data = path.read_bytes()
    for cut in range(len(data) + 1):
        path.write_bytes(data[:cut])
        complete = data[:cut].count(b"\n")
        if data[:cut].endswith(b"\n") or cut == 0:
            assert open_store(tmp_path / "db").read("s") == entries[:complete]
            continue
        with pytest.raises(StoreCorrupt) as info:
            open_store(tmp_path / "db")
        assert info.value.position == complete + 1
        repaired = open_store(tmp_path / "db", repair=True)
        assert repaired.read("s") == entries[:complete]
        assert path.read_bytes() == data[:data[:cut].rfind(b"\n") + 1]
        repaired.close()
        path.write_bytes(data)


def test_corrupt_middle_line_is_not_repaired(tmp_path):
    init_store(tmp_path / "db").close()
    path = tmp_path / "db" / "streams" / "s.log"
    path.write_bytes(b'{"seq":1,"type":"E","v":1,"payload":{},"meta":{}}\n'
                     b'garbage\n'
                     b'{"seq":3,"type":"E","v":1,"payload":{},"meta":{}}\n')
    with pytest.raises(StoreCorrupt):
        open_store(tmp_path / "db", repair=True)


def test_backups_and_archives_persist(tmp_path):
    store = init_store(tmp_path / "db", policy=ImmutabilityPolicy(Degree.CUT_OFF))
    store.create_stream("s")
    store.append("s", 1, [Event(f"E{i}") for i in range(5)])
    bid = store.backup_stream("s")
    store.update_at("s", 2, Event("X"), backup_id=bid)
    store.archive("s", 3)
    expected = store.read_stitched("s")
    store.close()
    again = open_store(tmp_path / "db")
    assert bid in again.backups
    assert [e.event_type for e in again.restore_backup(bid)] == ["E0", "E1", "E2", "E3", "E4"]
    assert again.read_stitched("s") == expected
    assert [e.sequence for e in again.read("s")] == [3, 4, 5]
    again.append("s", 6, [Event("E5")])
    again.close()
    assert [e.sequence for e in open_store(tmp_path / "db").read("s")] == [3, 4, 5, 6]


def test_store_size_and_lock(tmp_path):
    store = init_store(tmp_path / "db")
    store.create_stream("s")
    store.append("s", 1, [Event("E")])
    assert store_size(tmp_path / "db") > 0
    with store_lock(tmp_path / "db"):
        pass
