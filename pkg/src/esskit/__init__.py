"""Event store toolkit: streams, schemas, CQRS projections and schema evolution."""

from .cqrs import (
    AggregateDefinition,
    Command,
    CommandResult,
    EventSourcedSystem,
    Mode,
    Projection,
    ProjectorDefinition,
    QueryResult,
    Rejection,
    accept,
    fold_aggregate,
    merge_round_robin,
    project,
)
from .errors import (
    ConcurrencyConflict,
    DuplicateStream,
    EssError,
    ImmutabilityViolation,
    InvalidProjection,
    MalformedRecord,
    MissingUpcaster,
    NonConformingEvent,
    PositionOutOfRange,
    StoreCorrupt,
    TargetedRebuildUnsupported,
    ToleranceExceeded,
    TransformFailure,
    UnassignedStreamType,
    UnknownCommandType,
    UnknownFormatVersion,
    UnknownProjector,
    UnknownQuery,
    UnknownScriptTarget,
    UnknownStream,
)
from .events import Event, SequencedEvent
from .evolution import (
    AddField,
    AddType,
    Compatible,
    DropEvent,
    DropField,
    Incompatible,
    MigrationPlan,
    MigrationReport,
    RenameField,
    SplitEvent,
    SplitPart,
    Technique,
    Upcaster,
    Upcasting,
    archive_cold,
    check_versioned_events,
    copy_transform,
    dump_plan,
    in_place_transform,
    load_plan,
    read_plan,
    read_upcast,
    upcast_stream,
    weak_read,
)
from .harness import Trace, quiescent_mismatches, run_script
from .records import decode_record, encode_record
from .schema import (
    CohesionRule,
    Conformance,
    EventSchema,
    FieldSpec,
    OrderingRule,
    StoreSchema,
    StreamSchema,
    Violation,
    conforms_event,
    conforms_store,
    conforms_stream,
    dump_store_schema,
    load_store_schema,
    schema_superset,
    superset_gaps,
)
from .storage import init_store, open_store
from .store import Degree, EventStore, EventStream, ImmutabilityPolicy, MutationRecord

__version__ = "0.1.0"

__all__ = [
    "AddField",
    "AddType",
    "AggregateDefinition",
    "CohesionRule",
    "Command",
    "CommandResult",
    "Compatible",
    "Conformance",
    "Degree",
    "DropEvent",
    "DropField",
    "Event",
    "EventSchema",
    "EventSourcedSystem",
    "EventStore",
    "EventStream",
    "FieldSpec",
    "ImmutabilityPolicy",
    "Incompatible",
    "MigrationPlan",
    "MigrationReport",
    "Mode",
    "MutationRecord",
    "OrderingRule",
    "Projection",
    "ProjectorDefinition",
    "QueryResult",
    "Rejection",
    "RenameField",
    "SequencedEvent",
    "SplitEvent",
    "SplitPart",
    "StoreSchema",
    "StreamSchema",
    "Technique",
    "Trace",
    "Upcaster",
    "Upcasting",
    "Violation",
    "accept",
    "archive_cold",
    "check_versioned_events",
    "conforms_event",
    "conforms_store",
    "conforms_stream",
    "copy_transform",
    "decode_record",
    "dump_plan",
    "dump_store_schema",
    "encode_record",
    "fold_aggregate",
    "in_place_transform",
    "init_store",
    "load_plan",
    "load_store_schema",
    "merge_round_robin",
    "open_store",
    "project",
    "quiescent_mismatches",
    "read_plan",
    "read_upcast",
    "run_script",
    "schema_superset",
    "superset_gaps",
    "upcast_stream",
    "weak_read",
    "ConcurrencyConflict",
    "DuplicateStream",
    "EssError",
    "ImmutabilityViolation",
    "InvalidProjection",
    "MalformedRecord",
    "MissingUpcaster",
    "NonConformingEvent",
    "PositionOutOfRange",
    "StoreCorrupt",
    "TargetedRebuildUnsupported",
    "ToleranceExceeded",
    "TransformFailure",
    "UnassignedStreamType",
    "UnknownCommandType",
    "UnknownFormatVersion",
    "UnknownProjector",
    "UnknownQuery",
    "UnknownScriptTarget",
    "UnknownStream",
]
