import random

import pytest

from esskit import (
    AddField,
    AddType,
    Degree,
    DropEvent,
    DropField,
    Event,
    EventSchema,
    EventStore,
    FieldSpec,
    ImmutabilityPolicy,
    MigrationPlan,
    RenameField,
    SequencedEvent,
    SplitEvent,
    SplitPart,
    StoreSchema,
    StreamSchema,
    Technique,
    Upcaster,
    archive_cold,
    check_versioned_events,
    conforms_store,
    copy_transform,
    dump_plan,
    encode_record,
    in_place_transform,
    init_store,
    load_plan,
    open_store,
    project,
    upcast_stream,
    weak_read,
)
from esskit.demo import LICENSE_CREATED, LICENSE_SCHEMA, count_projector, type_count_projector
from esskit.errors import (
    ImmutabilityViolation,
    MissingUpcaster,
    ToleranceExceeded,
    TransformFailure,
)

from generators import mutable_store

LICENSE = {"customerId": "BlackMirror", "titleId": "TheNationalAnthemS01E01", "date": "2014-01-06"}
RECORD = (b'{"seq":1,"type":"LicenseCreated","v":1,"payload":{"customerId":"BlackMirror",'
          b'"titleId":"TheNationalAnthemS01E01","date":"2014-01-06"},"meta":{}}\n')


def license_store(n=5, degree=Degree.MUTABLE):
    store = EventStore("lic", ImmutabilityPolicy(degree))
    for i in range(n):
        store.create_stream(f"l{i}", "license")
        store.append(f"l{i}", 1, [Event("LicenseCreated", {**LICENSE, "customerId": f"c{i}"})])
    return store


def renamed_schema():
    created = EventSchema("LicenseCreated", 2, (
        FieldSpec("customer", "string"), FieldSpec("titleId", "string"), FieldSpec("date", "string")))
    return StoreSchema("licenses", 2, (StreamSchema("license", (created,)),))


# -- versioned events ------------------------------------------------------------------


def test_versioned_events_check():
    assert check_versioned_events(LICENSE_SCHEMA, LICENSE_SCHEMA)
    tightened = StoreSchema("licenses", 2, (StreamSchema("license", (
        EventSchema("LicenseCreated", 1, LICENSE_CREATED.fields + (FieldSpec("region", "string"),)),)),))
    verdict = check_versioned_events(StoreSchema("licenses", 1, (StreamSchema("license", (LICENSE_CREATED,)),)),
                                     tightened)
    assert not verdict and "region" in verdict.reason


# -- weak schema --------------------------------------------------------------------------


def test_weak_read_fills_defaults():
    with_region = EventSchema("LicenseCreated", 1,
                              LICENSE_CREATED.fields + (FieldSpec("region", "string", required=False, default="EU"),))
    ev = weak_read(RECORD, with_region)
    assert ev.payload["region"] == "EU" and ev.payload["customerId"] == "BlackMirror"


def test_weak_read_keeps_extras():
    raw = RECORD.replace(b'"date":"2014-01-06"', b'"date":"2014-01-06","extra":[1]')
    ev = weak_read(raw, LICENSE_CREATED)
    assert ev.payload["extra"] == [1]
    assert encode_record(SequencedEvent(ev, 1)) == raw


def test_weak_read_rename_exceeds_tolerance():
    with pytest.raises(ToleranceExceeded):
        weak_read(RECORD, renamed_schema().stream_schemas[0].event_schemas[0])
    wrong_kind = EventSchema("LicenseCreated", 1, (FieldSpec("date", "integer"),))
    with pytest.raises(ToleranceExceeded):
        weak_read(RECORD, wrong_kind)


# -- upcasting ---------------------------------------------------------------------------


def v1_to_v2(ev):
    return [ev.with_payload({**ev.payload, "region": "EU"}, version=2)]


def v2_to_v3(ev):
    p = dict(ev.payload)
    p["customer"] = p.pop("customerId")
    return [ev.with_payload(p, version=3)]


def _seq(ev, n=1):
    return SequencedEvent(ev, n)


CHAIN = [Upcaster("LicenseCreated", 1, v1_to_v2), Upcaster("LicenseCreated", 2, v2_to_v3)]


def test_chain_composes():
    store = mutable_store()
    store.create_stream("l")
    store.append("l", 1, [Event("LicenseCreated", LICENSE), Event("LicenseCreated", {**LICENSE, "region": "US"}, 2)])
    before = store.content_hash()
    view = upcast_stream(store.read("l"), CHAIN)
    direct = {"customer": "BlackMirror", "titleId": "TheNationalAnthemS01E01", "date": "2014-01-06"}
    assert view[0].event == Event("LicenseCreated", {**direct, "region": "EU"}, 3)
    assert view[1].event.payload["region"] == "US" and view[1].event.schema_version == 3
    assert store.content_hash() == before


def test_missing_upcaster():
    with pytest.raises(MissingUpcaster):
        upcast_stream([_seq(Event("LicenseCreated", LICENSE))], CHAIN[1:])


def test_split_renumbers_view_only():
    split = Upcaster("Both", 1, lambda ev: [Event("Left", {}, 2), Event("Right", {}, 2)])
    entries = [_seq(Event("Both"), 1), _seq(Event("Other"), 2)]
    view = upcast_stream(entries, [split], {"Both": 2, "Left": 2, "Right": 2})
    assert [(e.event_type, e.sequence) for e in view] == [("Left", 1), ("Right", 2), ("Other", 3)]


def test_upcaster_wrong_version_fails():
    bad = Upcaster("E", 1, lambda ev: [ev])
    with pytest.raises(TransformFailure):
        upcast_stream([_seq(Event("E"))], [bad])


# -- in place --------------------------------------------------------------------------------


def rename_plan(schema=None):
    return MigrationPlan(Technique.IN_PLACE, (RenameField("LicenseCreated", "customerId", "customer"),),
                         target_schema=schema)


def test_in_place_rename():
    store = license_store()
    report = in_place_transform(store, rename_plan(renamed_schema()))
    assert report.mutations == 5 and len(store.journal) == 5
    assert all(r.kind == "update" for r in store.journal)
    assert conforms_store(store, renamed_schema()).ok
    assert store.read("l3")[0].event.payload["customer"] == "c3"


def test_in_place_dry_run_changes_nothing():
    store = license_store()
    before = store.content_hash()
    report = in_place_transform(store, rename_plan(), dry_run=True)
    assert report.mutations == 5 and store.content_hash() == before and store.journal == []


def test_in_place_refused_on_strict():
    store = license_store(degree=Degree.STRICT)
    before = {sid: store.stream_bytes(sid) for sid in store.stream_ids()}
    with pytest.raises(ImmutabilityViolation, match="immutability policy 'strict' forbids in-place"):
        in_place_transform(store, rename_plan())
    assert {sid: store.stream_bytes(sid) for sid in store.stream_ids()} == before


def test_in_place_cut_off_backups_restore():
    store = license_store(degree=Degree.CUT_OFF)
    original = {sid: store.stream_bytes(sid) for sid in store.stream_ids()}
    report = in_place_transform(store, rename_plan())
    assert len(report.backups) == 5
    for sid, bid in zip(report.streams, report.backups):
        assert b"".join(encode_record(e) for e in store.restore_backup(bid)) == original[sid]


def test_in_place_non_conforming_target_is_refused():
    store = license_store()
    before = store.content_hash()
    wrong = rename_plan(LICENSE_SCHEMA)  # renamed events no longer carry customerId
    with pytest.raises(TransformFailure) as info:
        in_place_transform(store, wrong)
    assert info.value.report.violations and store.content_hash() == before


def test_split_and_drop_in_place():
    store = mutable_store()
    store.create_stream("s")
    store.append("s", 1, [Event("AB", {"a": 1, "b": 2}), Event("Gone"), Event("Keep")])
    plan = MigrationPlan(Technique.IN_PLACE, (
        SplitEvent("AB", (SplitPart("A", ("a",)), SplitPart("B", ("b",)))), DropEvent("Gone")))
    in_place_transform(store, plan)
    got = [(e.event_type, e.event.payload, e.sequence) for e in store.read("s")]
    assert got == [("A", {"a": 1}, 1), ("B", {"b": 2}, 2), ("Keep", {}, 3)]


# -- copy and transform ------------------------------------------------------------------------


def test_copy_transform_leaves_source(tmp_path):
    source = license_store(degree=Degree.STRICT)
    before = source.content_hash()
    plan = MigrationPlan(Technique.COPY_TRANSFORM, rename_plan().actions, target_schema=renamed_schema())
    target, report = copy_transform(source, plan, "lic-v2", target_root=tmp_path / "v2")
    assert source.content_hash() == before
    assert conforms_store(target, renamed_schema()).ok
    assert (tmp_path / "v2" / "lineage.log").read_text().count("\n") == 5
    target.close()
    reopened = open_store(tmp_path / "v2")
    assert reopened.read("l0")[0].event.payload["customer"] == "c0"


def test_copy_identity():
    source = license_store()
    target, _ = copy_transform(source, MigrationPlan(Technique.COPY_TRANSFORM), "copy")
    for sid in source.stream_ids():
        assert target.read(sid) == source.read(sid)


def test_copy_dry_run_creates_nothing(tmp_path):
    target, report = copy_transform(license_store(), MigrationPlan(Technique.COPY_TRANSFORM, rename_plan().actions),
                                    "v2", target_root=tmp_path / "v2", dry_run=True)
    assert target is None and not (tmp_path / "v2").exists()
    assert report.streams["l0"].events_out == 1


def test_copy_failure_removes_target(tmp_path):
    plan = MigrationPlan(Technique.COPY_TRANSFORM, (), target_schema=renamed_schema())
    with pytest.raises(TransformFailure):
        copy_transform(license_store(), plan, "v2", target_root=tmp_path / "v2")
    assert not (tmp_path / "v2").exists()


# -- cold archive -----------------------------------------------------------------------------


def test_archive_cold(tmp_path):
    store = init_store(tmp_path / "db", policy=ImmutabilityPolicy(Degree.MUTABLE))
    store.create_stream("s")
    store.append("s", 1, [Event(f"E{i}") for i in range(5)])
    full = project([store.stream("s")], type_count_projector())
    archive_cold(store, "s", 3)
    assert [e.sequence for e in store.read("s")] == [3, 4, 5]
    assert project([store.stream("s")], count_projector()).state == 3
    assert project([("s", store.read_stitched("s"))], type_count_projector()).state == full.state


# -- plan documents ---------------------------------------------------------------------------


def test_plan_round_trip(tmp_path):
    rng = random.Random(31)
    actions = (AddType("New"), AddField("E", "f", {"x": [1]}), RenameField("E", "a", "b", 2),
               DropField("E", "c"), SplitEvent("S", (SplitPart("L", ("l",)), SplitPart("R", ("r",)))),
               DropEvent("D"))
    for _ in range(20):
        chosen = tuple(rng.sample(actions, rng.randint(0, len(actions))))
        plan = MigrationPlan(rng.choice(list(Technique)), chosen, 1, 2, ("s1",), None, "target")
        assert load_plan(dump_plan(plan)) == plan


def test_plan_references():
    plan = MigrationPlan(Technique.UPCAST, (AddField("Nope", "x", 1),))
    assert plan.check_references(LICENSE_SCHEMA) == ["add_field references undeclared event type Nope"]
