import pytest

from esskit import run_script, quiescent_mismatches
from esskit.demo import license_system
from esskit.errors import UnknownScriptTarget
from esskit.harness import dump_script, load_script

from generators import mutable_store

CREATE = {"op": "command", "type": "CreateLicense", "stream": "l1",
          "payload": {"customerId": "BlackMirror", "titleId": "TheNationalAnthemS01E01", "date": "2014-01-06"}}
QUERY = {"op": "query", "name": "active-licenses"}


def fresh():
    return license_system(mutable_store())


def test_lag_before_delivery():
    trace = run_script(fresh(), [CREATE, QUERY])
    (q,) = trace.results("query")
    assert q["result"]["value"] == 0 and q["result"]["lag"] == 1
    assert trace.entries[0]["windows"]["licenses"] == 1
    assert trace.max_window["licenses-sync"] == 0


def test_quiesce_closes_window():
    system = fresh()
    trace = run_script(system, [CREATE, {"op": "quiesce"}, QUERY])
    assert trace.results("query")[0]["result"] == {"value": 1, "checkpoint": {"l1": 1}, "lag": 0,
                                                  "mode": "pre_built"}
    assert quiescent_mismatches(system) == []


def test_race_has_one_winner_for_every_seed():
    revoke = {"type": "RevokeLicense", "stream": "l1", "payload": {}}
    orders = set()
    for seed in range(50):
        trace = run_script(fresh(), [CREATE, {"op": "race", "commands": [revoke, revoke]}], seed)
        race = trace.results("race")[0]
        statuses = sorted(r["status"] for r in race["results"])
        assert statuses == ["appended", "conflict"]
        # the first committer wins
        assert race["results"][race["order"][0]]["status"] == "appended"
        orders.add(tuple(race["order"]))
    assert orders == {(0, 1), (1, 0)}


def test_same_seed_same_trace():
    script = [CREATE, {"op": "deliver", "projector": "licenses"}, QUERY,
              {"op": "race", "commands": [dict(CREATE, stream="l2"), dict(CREATE, stream="l2")]},
              {"op": "deliver", "projector": "event-count"}, QUERY]
    texts = {run_script(fresh(), script, 7).to_text() for _ in range(3)}
    assert len(texts) == 1


def test_unknown_targets_rejected_before_running():
    system = fresh()
    for bad in ({"op": "query", "name": "nope"}, {"op": "deliver", "projector": "nope"},
                {"op": "command", "type": "Nope", "stream": "x"}):
        with pytest.raises(UnknownScriptTarget):
            run_script(system, [CREATE, bad])
    assert system.store.stream_ids() == []
    with pytest.raises(ValueError):
        run_script(system, [{"op": "dance"}])


def test_script_document_round_trip():
    script = [CREATE, QUERY, {"op": "quiesce"}]
    assert load_script(dump_script(script)) == script
