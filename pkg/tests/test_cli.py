import json
import subprocess
import sys

import pytest

from esskit import (
    Event,
    MigrationPlan,
    RenameField,
    Technique,
    decode_record,
    dump_plan,
    dump_store_schema,
    open_store,
)
from esskit.cli import main
from esskit.demo import LICENSE_SCHEMA
from esskit.harness import dump_script

GOLDEN = ('{"seq":1,"type":"LicenseCreated","v":1,"payload":{"customerId":"BlackMirror",'
          '"titleId":"TheNationalAnthemS01E01","date":"2014-01-06"},"meta":{}}')
CREATED = ('{"type":"LicenseCreated","payload":{"customerId":"BlackMirror",'
           '"titleId":"TheNationalAnthemS01E01","date":"2014-01-06"}}')


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def db(tmp_path, capsys):
    root = tmp_path / "db"
    assert run(capsys, "init", root)[0] == 0
    return root


def test_append_and_read_golden(db, capsys):
    code, out, _ = run(capsys, "append", "lic-1", "--store", db, "--expect", 1, "--event", CREATED,
                       "--type", "license")
    assert code == 0 and "lic-1 at 1..1" in out
    code, out, _ = run(capsys, "read", "lic-1", "--store", db)
    assert out == GOLDEN + "\n"
    code, _, err = run(capsys, "append", "lic-1", "--store", db, "--expect", 1, "--event", CREATED)
    assert code == 1 and err.strip() == "concurrency conflict: expected 2"


def test_exit_codes(db, tmp_path, capsys):
    assert run(capsys, "read", "nope", "--store", db)[0] == 1
    assert run(capsys, "streams")[0] == 2
    assert run(capsys, "init", db)[0] == 1
    assert run(capsys, "stats", "--store", tmp_path / "missing")[0] == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    (db / "streams" / "s.log").write_text('{"seq":1,"type":"E","v":1,"payload":{},"meta":{}}\n{"seq":2')
    code, _, err = run(capsys, "streams", "--store", db)
    assert code == 3 and "torn write" in err
    assert run(capsys, "streams", "--store", db, "--repair")[0] == 0
    assert run(capsys, "streams", "--store", db)[0] == 0


def test_json_output_matches_library(db, capsys):
    for i, n in enumerate((2, 3, 5)):
        run(capsys, "append", f"s{i}", "--store", db, "--expect", 1, "--event",
            "\n".join('{"type":"E%d"}' % j for j in range(n)))
    code, out, _ = run(capsys, "--json", "--store", db, "stats")
    stats = json.loads(out)
    assert code == 0 and stats["streams"] == 3 and stats["events"] == 10
    # independent recount straight from the log files
    logs = sorted((db / "streams").glob("*.log"))
    types = {}
    for line in b"".join(p.read_bytes() for p in logs).splitlines():
        t = json.loads(line)["type"]
        types[t] = types.get(t, 0) + 1
    assert len(logs) == 3 and sum(types.values()) == 10 and stats["types"] == types
    code, out, _ = run(capsys, "streams", "--store", db, "--json")
    rows = [json.loads(line) for line in out.splitlines()]
    store = open_store(db)
    assert rows == [{"stream": sid, "type": None, "length": store.stream(sid).length, "archived_before": 1}
                    for sid in store.stream_ids()]
    code, out, _ = run(capsys, "read", "s2", "--store", db)
    assert [decode_record(line.encode() + b"\n") for line in out.splitlines()] == store.read("s2")


def test_validate(db, tmp_path, capsys):
    schema = tmp_path / "schema.jsonl"
    schema.write_text(dump_store_schema(LICENSE_SCHEMA))
    run(capsys, "append", "l1", "--store", db, "--expect", 1, "--type", "license", "--event",
        '{"type":"LicenseRevoked"}')
    code, out, _ = run(capsys, "validate", "--store", db, "--schema", schema)
    assert code == 1 and out.splitlines()[-1] == "conforms: false"
    assert "stream l1 seq 1 rule initial(LicenseCreated)" in out
    run(capsys, "append", "l1", "--store", db, "--expect", 2, "--event", '{"type":"Refund","v":3}')
    code, out, _ = run(capsys, "validate", "--store", db, "--schema", schema)
    assert "stream l1 seq 2: no event schema for type Refund v3" in out.splitlines()
    ok = tmp_path / "ok"
    run(capsys, "init", ok)
    run(capsys, "append", "l1", "--store", ok, "--expect", 1, "--type", "license", "--event", CREATED)
    assert run(capsys, "validate", "--store", ok, "--schema", schema)[1] == "conforms: true\n"


def plan_file(tmp_path, technique):
    path = tmp_path / f"{technique.value}.jsonl"
    path.write_text(dump_plan(MigrationPlan(technique, (RenameField("LicenseCreated", "customerId", "customer"),))))
    return path


def test_in_place_refused_on_strict(db, tmp_path, capsys):
    run(capsys, "append", "l1", "--store", db, "--expect", 1, "--event", CREATED)
    before = (db / "streams" / "l1.log").read_bytes()
    code, _, err = run(capsys, "migrate", "--store", db, "--plan", plan_file(tmp_path, Technique.IN_PLACE))
    assert code == 1
    assert err.strip() == "immutability policy 'strict' forbids in-place transformation"
    assert (db / "streams" / "l1.log").read_bytes() == before


def test_in_place_on_mutable(tmp_path, capsys):
    root = tmp_path / "m"
    run(capsys, "init", root, "--policy", "mutable")
    run(capsys, "append", "l1", "--store", root, "--expect", 1, "--event", CREATED)
    code, out, _ = run(capsys, "migrate", "--store", root, "--plan", plan_file(tmp_path, Technique.IN_PLACE))
    assert code == 0 and "1 mutation(s)" in out
    assert "customer" in open_store(root).read("l1")[0].event.payload


def test_copy_transform(db, tmp_path, capsys):
    run(capsys, "append", "l1", "--store", db, "--expect", 1, "--event", CREATED)
    plan = plan_file(tmp_path, Technique.COPY_TRANSFORM)
    code, _, _ = run(capsys, "migrate", "--store", db, "--plan", plan, "--dry-run", "--target", tmp_path / "v2")
    assert code == 0 and not (tmp_path / "v2").exists()
    assert run(capsys, "migrate", "--store", db, "--plan", plan)[0] == 2
    code, _, _ = run(capsys, "migrate", "--store", db, "--plan", plan, "--target", tmp_path / "v2")
    assert code == 0 and open_store(tmp_path / "v2").read("l1")[0].event.payload["customer"] == "BlackMirror"
    code, out, _ = run(capsys, "read", "l1", "--store", db, "--plan", plan)
    assert '"customer":"BlackMirror"' in out and '"v":2' in out


def test_rebuild_counts(db, capsys):
    store = open_store(db, fsync=False)
    for i in range(10):
        store.create_stream(f"s{i}")
        store.append(f"s{i}", 1, [Event("E", {"n": j}) for j in range(1000)])
    store.close()
    code, out, _ = run(capsys, "rebuild", "--store", db, "--projector", "event-count", "--json")
    row = json.loads(out)
    assert code == 0 and row["events"] == 10000 and row["state"] == 10000
    assert run(capsys, "rebuild", "--store", db, "--projector", "nope")[0] == 2


def test_archive_and_stitched_read(tmp_path, capsys):
    root = tmp_path / "a"
    run(capsys, "init", root, "--archive-exempt")
    run(capsys, "append", "s", "--store", root, "--expect", 1, "--event",
        "\n".join('{"type":"E%d"}' % j for j in range(5)))
    assert run(capsys, "archive", "s", "--store", root, "--before", 3)[0] == 0
    assert len(run(capsys, "read", "s", "--store", root)[1].splitlines()) == 3
    assert len(run(capsys, "read", "s", "--store", root, "--stitched")[1].splitlines()) == 5
    stats = json.loads(run(capsys, "stats", "--store", root, "--json")[1])
    assert stats["events"] == 3 and stats["archived_events"] == 2


def test_simulate(tmp_path, capsys):
    script = tmp_path / "script.jsonl"
    script.write_text(dump_script([
        {"op": "command", "type": "CreateLicense", "stream": "l1",
         "payload": {"customerId": "c", "titleId": "t", "date": "d"}},
        {"op": "query", "name": "active-licenses"}]))
    code, out, _ = run(capsys, "simulate", "--script", script, "--seed", 3)
    lines = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and lines[1]["result"]["lag"] == 1


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "esskit.cli", "init", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "initialized store x" in proc.stdout
