"""Transactional table metadata for the three lakehouse tables.

A lakehouse directory looks like::

    <root>/lakehouse.json                      format version + baseline schemas
    <root>/metadata/snap-00000001.json         one immutable file per snapshot
    <root>/metadata/latest                     hint: highest published snapshot id
    <root>/<table>/<data_set_id>/<problem_id>/<uuid>.seg

Publishing snapshot N+1 is a hard link of a fully written temp file onto
``snap-<N+1>.json``; the link fails if another committer got there first,
which makes it the compare-and-swap of the commit protocol. Segments are
written before the link, so a crash leaves at worst unreferenced files.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, Sequence
from urllib.parse import quote, unquote

from .errors import (
    CommitContention,
    EmptyTransaction,
    InvalidPartitionKey,
    IoFailure,
    NotALakehouse,
    SchemaMismatch,
    TransactionClosed,
    UnknownSnapshot,
    VersionTooNew,
)
from .schema import BASELINE_SCHEMAS, TABLES, FieldType, TableSchema
from .segment import (
    DEFAULT_POLICY,
    Condition,
    Eq,
    EncodingPolicy,
    IOStats,
    RowBatch,
    Segment,
    read_segment,
    write_columns,
)

FORMAT_VERSION = 1
MAX_COMMIT_RETRIES = 100

FaultHook = Callable[[str], None]

# fault points on the commit path, in order
FAULT_POINTS = ("segment_written", "metadata_written", "published", "hint_updated")


@dataclass(frozen=True, order=True)
class PartitionKey:
    data_set_id: str
    problem_id: str

    def __post_init__(self):
        for part in (self.data_set_id, self.problem_id):
            if not isinstance(part, str) or not part or "\x00" in part:
                raise InvalidPartitionKey(f"invalid partition key component {part!r}")

    def dirnames(self) -> tuple[str, str]:
        return encode_component(self.data_set_id), encode_component(self.problem_id)

    def to_dict(self) -> dict:
        return {"data_set_id": self.data_set_id, "problem_id": self.problem_id}


def encode_component(s: str) -> str:
    enc = quote(s, safe="")
    if enc.startswith("."):
        enc = "%2E" + enc[1:]
    return enc


def decode_component(s: str) -> str:
    return unquote(s)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass
class Snapshot:
    snapshot_id: int
    parent_id: Optional[int]
    timestamp: str
    operation: str
    schemas: dict[str, TableSchema]
    manifest: dict[str, dict[PartitionKey, list[Segment]]]
    summary: dict = field(default_factory=dict)

    @property
    def schema_ids(self) -> dict[str, int]:
        return {t: s.schema_id for t, s in self.schemas.items()}

    def row_count(self, table: str) -> int:
        return sum(s.row_count for segs in self.manifest.get(table, {}).values() for s in segs)

    def to_dict(self, relpath: Callable[[str], str], memo: Optional[dict] = None) -> dict:
        memo = {} if memo is None else memo

        def seg_dict(s: Segment) -> dict:
            # segments are immutable, so each entry is serialized once per handle
            k = (s.path, s.added_snapshot)
            d = memo.get(k)
            if d is None:
                d = memo[k] = s.to_dict(relpath(s.path))
            return d

        return {
            "snapshot_id": self.snapshot_id,
            "parent_id": self.parent_id,
            "timestamp": self.timestamp,
            "operation": self.operation,
            "summary": self.summary,
            "schema_ids": self.schema_ids,
            "schemas": {t: s.to_dict() for t, s in self.schemas.items()},
            "manifest": {
                t: [
                    {**k.to_dict(), "segments": [seg_dict(s) for s in segs]}
                    for k, segs in sorted(parts.items())
                ]
                for t, parts in self.manifest.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict, abspath: Callable[[str], str], memo: Optional[dict] = None) -> "Snapshot":
        memo = {} if memo is None else memo

        def segment(s: dict) -> Segment:
            k = (s["path"], s.get("added_snapshot"), s["checksum"])
            seg = memo.get(k)
            if seg is None:
                seg = memo[k] = Segment.from_dict(s, abspath(s["path"]))
            return seg

        manifest = {}
        for t, entries in d["manifest"].items():
            manifest[t] = {
                PartitionKey(e["data_set_id"], e["problem_id"]): [segment(s) for s in e["segments"]]
                for e in entries
            }
        return cls(
            d["snapshot_id"],
            d["parent_id"],
            d["timestamp"],
            d.get("operation", "append"),
            {t: TableSchema.from_dict(s) for t, s in d["schemas"].items()},
            manifest,
            d.get("summary", {}),
        )


@dataclass
class PartitionInfo:
    key: PartitionKey
    row_count: int
    byte_size: int
    segment_count: int

    def to_dict(self) -> dict:
        return {**self.key.to_dict(), "row_count": self.row_count, "byte_size": self.byte_size,
                "segments": self.segment_count}


@dataclass
class ScanBatch:
    """Name-keyed columns decoded from one segment."""

    columns: dict[str, list]
    num_rows: int
    segment: Segment
    key: PartitionKey


class ReadView:
    """Immutable view of the lakehouse as of one snapshot (or the empty state)."""

    def __init__(self, lakehouse: "Lakehouse", snapshot: Optional[Snapshot]):
        self.lakehouse = lakehouse
        self.snapshot = snapshot

    @property
    def snapshot_id(self) -> Optional[int]:
        return None if self.snapshot is None else self.snapshot.snapshot_id

    @property
    def io(self) -> IOStats:
        return self.lakehouse.io

    def schema(self, table: str) -> TableSchema:
        _check_table(table)
        if self.snapshot is None:
            return self.lakehouse.baseline_schemas[table]
        return self.snapshot.schemas[table]

    def partition_map(self, table: str) -> dict[PartitionKey, list[Segment]]:
        _check_table(table)
        if self.snapshot is None:
            return {}
        return self.snapshot.manifest.get(table, {})

    def segments(self, table: str, key: Optional[PartitionKey] = None) -> list[Segment]:
        parts = self.partition_map(table)
        if key is not None:
            return list(parts.get(key, ()))
        return [s for k in sorted(parts) for s in parts[k]]

    def row_count(self, table: str, key: Optional[PartitionKey] = None) -> int:
        return sum(s.row_count for s in self.segments(table, key))

    def scan(
        self,
        table: str,
        columns: Optional[Sequence[str]] = None,
        key: Optional[PartitionKey] = None,
        predicate: Optional[Mapping[str, Condition]] = None,
    ) -> Iterator[ScanBatch]:
        """Decode ``columns`` of every segment of ``table`` (optionally one partition)."""
        schema = self.schema(table)
        names = schema.names if columns is None else list(columns)
        fids = [schema.field(n).field_id for n in names]
        pred = {schema.field(n).field_id: c for n, c in (predicate or {}).items()}
        parts = self.partition_map(table)
        keys = [key] if key is not None else sorted(parts)
        for k in keys:
            for seg in parts.get(k, ()):
                for batch in read_segment(seg, fids, pred, self.io):
                    cols = {n: batch.columns[f] for n, f in zip(names, fids)}
                    yield ScanBatch(cols, batch.num_rows, seg, k)

    def rows(self, table: str, key: Optional[PartitionKey] = None, **kw) -> list[dict[str, Any]]:
        """Row dicts for small tables and tests; not for the hot path."""
        out = []
        for b in self.scan(table, key=key, **kw):
            names = list(b.columns)
            out.extend(dict(zip(names, vals)) for vals in zip(*b.columns.values()))
        return out


def list_partitions(view: ReadView, table: str) -> list[PartitionInfo]:
    """Partition sizes from manifest metadata alone."""
    return [
        PartitionInfo(k, sum(s.row_count for s in segs), sum(s.byte_size for s in segs), len(segs))
        for k, segs in sorted(view.partition_map(table).items())
    ]


def _check_table(table: str) -> None:
    if table not in TABLES:
        raise SchemaMismatch(f"unknown table {table!r}")


class AppendTransaction:
    """Stages segments for one table and publishes them in a single snapshot."""

    def __init__(self, lakehouse: "Lakehouse", table: str):
        _check_table(table)
        self.lakehouse = lakehouse
        self.table = table
        self.staged: list[tuple[PartitionKey, Segment]] = []
        self.committed: Optional[Snapshot] = None
        self._lock = threading.Lock()

    def _ensure_open(self) -> None:
        if self.committed is not None:
            raise TransactionClosed("transaction already committed")

    def stage_rows(self, rows: Iterable[Mapping[str, Any]]) -> list[Segment]:
        """Write one segment per partition for rows keyed by column name."""
        self._ensure_open()
        schema = self.lakehouse.current_schema(self.table)
        rows = list(rows)
        names = set().union(*(r.keys() for r in rows)) if rows else set()
        for n in names:
            schema.field(n)
        by_key: dict[PartitionKey, list] = {}
        for r in rows:
            key = PartitionKey(r.get("data_set_id"), r.get("problem_id"))
            by_key.setdefault(key, []).append(r)
        out = []
        for key, group in by_key.items():
            cols = {n: [r.get(n) for r in group] for n in schema.names}
            out.append(self.stage_columns(key, cols, len(group), schema))
        return out

    def stage_columns(
        self,
        key: PartitionKey,
        columns: Mapping[str, list],
        row_count: int,
        schema: Optional[TableSchema] = None,
    ) -> Segment:
        """Write one segment of already-columnar rows that all belong to ``key``."""
        self._ensure_open()
        schema = schema or self.lakehouse.current_schema(self.table)
        for n in ("data_set_id", "problem_id"):
            expected = getattr(key, n)
            col = columns.get(n)
            if col is None or col.count(expected) != len(col):
                raise SchemaMismatch(f"rows outside partition {key}")
        fcols = {schema.field(n).field_id: v for n, v in columns.items()}
        path = self.lakehouse.segment_path(self.table, key)
        seg = write_columns(fcols, schema, path, row_count, self.lakehouse.policy, self.lakehouse.durable)
        with self._lock:
            self.staged.append((key, seg))
        self.lakehouse._fault("segment_written")
        return seg

    @property
    def staged_rows(self) -> int:
        return sum(s.row_count for _, s in self.staged)

    def commit(self) -> Snapshot:
        self._ensure_open()
        if not self.staged:
            raise EmptyTransaction("nothing staged")
        staged = list(self.staged)
        table = self.table

        def apply(parent: Optional[Snapshot], new_id: int) -> Snapshot:
            schemas = dict(parent.schemas) if parent else dict(self.lakehouse.baseline_schemas)
            current = schemas[table]
            for _, seg in staged:
                for c in seg.columns:
                    f = next((x for x in current.fields if x.field_id == c.field_id), None)
                    if f is None or f.type is not c.type:
                        raise SchemaMismatch(f"segment field {c.field_id} incompatible with schema {current.schema_id}")
            manifest = {t: dict(p) for t, p in parent.manifest.items()} if parent else {t: {} for t in TABLES}
            parts = manifest.setdefault(table, {})
            for key, seg in staged:
                seg = Segment(seg.path, seg.row_count, seg.schema_version, seg.columns, seg.checksum,
                              seg.byte_size, new_id)
                parts[key] = list(parts.get(key, ())) + [seg]
            summary = {"table": table, "added_segments": len(staged),
                       "added_rows": sum(s.row_count for _, s in staged)}
            return Snapshot(new_id, parent.snapshot_id if parent else None, _utcnow(), "append",
                            schemas, manifest, summary)

        self.committed = self.lakehouse._commit(apply)
        return self.committed


class Lakehouse:
    """Handle on one lakehouse directory; safe to share between threads."""

    def __init__(self, root: Path, meta: dict, durable: bool = True, policy: EncodingPolicy = DEFAULT_POLICY):
        self.root = root
        self.meta_dir = root / "metadata"
        self.baseline_schemas = {t: TableSchema.from_dict(s) for t, s in meta["tables"].items()}
        self.durable = durable
        self.policy = policy
        self.io = IOStats()
        self.fault_hook: Optional[FaultHook] = None
        self.max_retries = MAX_COMMIT_RETRIES
        self._cache: dict[int, Snapshot] = {}
        self._cache_lock = threading.Lock()
        self._seg_objects: dict[tuple, Segment] = {}
        self._seg_dicts: dict[tuple, dict] = {}

    # ---- paths -----------------------------------------------------------
    def _snap_path(self, sid: int) -> Path:
        return self.meta_dir / f"snap-{sid:08d}.json"

    def segment_path(self, table: str, key: PartitionKey) -> Path:
        ds, prob = key.dirnames()
        return self.root / table / ds / prob / f"{uuid.uuid4().hex}.seg"

    def partition_dir(self, table: str, key: PartitionKey) -> Path:
        ds, prob = key.dirnames()
        return self.root / table / ds / prob

    def _rel(self, p: str) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def _abs(self, p: str) -> str:
        return str(self.root / p)

    def _fault(self, point: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(point)

    # ---- snapshots -------------------------------------------------------
    def load_snapshot(self, sid: int) -> Snapshot:
        with self._cache_lock:
            snap = self._cache.get(sid)
        if snap is not None:
            return snap
        try:
            with open(self._snap_path(sid), "rb") as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise UnknownSnapshot(f"no snapshot {sid}") from None
        with self._cache_lock:
            memo = self._seg_objects
        snap = Snapshot.from_dict(d, self._abs, memo)
        with self._cache_lock:
            self._cache[sid] = snap
        return snap

    def latest_snapshot_id(self) -> int:
        """Highest published snapshot id (0 when none)."""
        try:
            hint = int((self.meta_dir / "latest").read_text().strip() or 0)
        except (FileNotFoundError, ValueError):
            hint = 0
        if hint and not self._snap_path(hint).exists():
            hint = 0
        n = hint
        while self._snap_path(n + 1).exists():
            n += 1
        return n

    def snapshot_ids(self) -> list[int]:
        return list(range(1, self.latest_snapshot_id() + 1))

    def latest(self) -> Optional[Snapshot]:
        sid = self.latest_snapshot_id()
        return self.load_snapshot(sid) if sid else None

    def current_schema(self, table: str) -> TableSchema:
        _check_table(table)
        snap = self.latest()
        return snap.schemas[table] if snap else self.baseline_schemas[table]

    def _write_hint(self, sid: int) -> None:
        tmp = self.meta_dir / f".latest.{uuid.uuid4().hex}.tmp"
        tmp.write_text(str(sid))
        os.replace(tmp, self.meta_dir / "latest")

    def _publish(self, snap: Snapshot) -> bool:
        data = json.dumps(snap.to_dict(self._rel, self._seg_dicts), separators=(",", ":")).encode()
        tmp = self.meta_dir / f".snap-{snap.snapshot_id:08d}.{uuid.uuid4().hex}.tmp"
        try:
            with open(tmp, "xb") as fh:
                fh.write(data)
                if self.durable:
                    fh.flush()
                    os.fsync(fh.fileno())
            self._fault("metadata_written")
            try:
                os.link(tmp, self._snap_path(snap.snapshot_id))
            except FileExistsError:
                return False
        except OSError as exc:
            raise IoFailure(f"cannot publish snapshot {snap.snapshot_id}: {exc}") from exc
        finally:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        with self._cache_lock:
            self._cache[snap.snapshot_id] = snap
        self._fault("published")
        try:
            self._write_hint(snap.snapshot_id)
        except OSError:
            pass  # the hint is advisory; readers probe past it
        self._fault("hint_updated")
        return True

    def _commit(self, apply: Callable[[Optional[Snapshot], int], Snapshot]) -> Snapshot:
        rng = random.Random()
        for attempt in range(self.max_retries):
            parent = self.latest()
            new_id = (parent.snapshot_id if parent else 0) + 1
            snap = apply(parent, new_id)
            if self._publish(snap):
                return snap
            time.sleep(rng.uniform(0, 0.001 * min(attempt + 1, 10)))
        raise CommitContention(f"commit failed after {self.max_retries} attempts")

    # ---- public operations ----------------------------------------------
    def begin_append(self, table: str) -> AppendTransaction:
        return AppendTransaction(self, table)

    def read_at(self, snapshot_id: Optional[int] = None) -> ReadView:
        if snapshot_id is None:
            return ReadView(self, self.latest())
        if snapshot_id < 1:
            raise UnknownSnapshot(f"no snapshot {snapshot_id}")
        return ReadView(self, self.load_snapshot(snapshot_id))

    def add_column(self, table: str, name: str, type: FieldType | str, default_null: bool = True) -> TableSchema:
        """Publish a snapshot whose ``table`` schema has one more nullable column."""
        _check_table(table)
        if not default_null:
            raise SchemaMismatch("added columns must default to null")
        ftype = FieldType(type)

        def apply(parent: Optional[Snapshot], new_id: int) -> Snapshot:
            schemas = dict(parent.schemas) if parent else dict(self.baseline_schemas)
            schemas[table] = schemas[table].add_field(name, ftype)
            manifest = {t: dict(p) for t, p in parent.manifest.items()} if parent else {t: {} for t in TABLES}
            return Snapshot(new_id, parent.snapshot_id if parent else None, _utcnow(), "add_column",
                            schemas, manifest, {"table": table, "column": name, "type": ftype.value})

        return self._commit(apply).schemas[table]

    def snapshots(self) -> list[dict]:
        out = []
        for sid in self.snapshot_ids():
            s = self.load_snapshot(sid)
            out.append({
                "snapshot_id": s.snapshot_id,
                "parent_id": s.parent_id,
                "timestamp": s.timestamp,
                "operation": s.operation,
                "summary": s.summary,
                "row_counts": {t: s.row_count(t) for t in TABLES},
            })
        return out

    def drop_caches(self) -> None:
        with self._cache_lock:
            self._cache.clear()
            self._seg_objects.clear()
            self._seg_dicts.clear()


def open_lakehouse(
    root: str | os.PathLike,
    create_if_missing: bool = False,
    durable: bool = True,
    policy: EncodingPolicy = DEFAULT_POLICY,
) -> Lakehouse:
    root = Path(root)
    meta_file = root / "lakehouse.json"
    if not meta_file.exists():
        if not create_if_missing:
            raise NotALakehouse(f"{root} is not a lakehouse")
        try:
            (root / "metadata").mkdir(parents=True, exist_ok=True)
            meta = {
                "format": "obslake",
                "format_version": FORMAT_VERSION,
                "created": _utcnow(),
                "tables": {t: BASELINE_SCHEMAS[t].to_dict() for t in TABLES},
            }
            tmp = root / f".lakehouse.{uuid.uuid4().hex}.tmp"
            tmp.write_text(json.dumps(meta, indent=2))
            try:
                os.link(tmp, meta_file)
            except FileExistsError:
                pass  # created concurrently
            finally:
                tmp.unlink()
        except OSError as exc:
            raise IoFailure(f"cannot create lakehouse at {root}: {exc}") from exc
    try:
        meta = json.loads(meta_file.read_text())
    except (OSError, ValueError) as exc:
        raise NotALakehouse(f"unreadable lakehouse metadata in {root}") from exc
    if meta.get("format") != "obslake":
        raise NotALakehouse(f"{root} is not a lakehouse")
    if int(meta.get("format_version", 0)) > FORMAT_VERSION:
        raise VersionTooNew(f"format version {meta['format_version']} > {FORMAT_VERSION}")
    return Lakehouse(root, meta, durable=durable, policy=policy)


# module-level spellings of the handle methods
def begin_append(handle: Lakehouse, table: str) -> AppendTransaction:
    return handle.begin_append(table)


def stage_rows(txn: AppendTransaction, rows: Iterable[Mapping[str, Any]]) -> list[Segment]:
    return txn.stage_rows(rows)


def commit(txn: AppendTransaction) -> Snapshot:
    return txn.commit()


def read_at(handle: Lakehouse, snapshot_id: Optional[int] = None) -> ReadView:
    return handle.read_at(snapshot_id)


def add_column(handle: Lakehouse, table: str, name: str, type: FieldType | str, default_null: bool = True) -> TableSchema:
    return handle.add_column(table, name, type, default_null)


__all__ = [
    "AppendTransaction",
    "FAULT_POINTS",
    "Eq",
    "Lakehouse",
    "PartitionInfo",
    "PartitionKey",
    "ReadView",
    "ScanBatch",
    "Snapshot",
    "add_column",
    "begin_append",
    "commit",
    "list_partitions",
    "open_lakehouse",
    "read_at",
    "stage_rows",
    "RowBatch",
]
