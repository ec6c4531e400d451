"""JSONL ingestion into the three lakehouse tables.

Dimension streams (implementations, tests) commit once per call. The
observation stream is buffered per execution until its ``$end_execution``
marker (or end of stream) so step contiguity can be checked, then grouped by
partition and committed every ``batch_rows`` rows.
"""

from __future__ import annotations

import json
import os
import time
from collections import Counter
from operator import itemgetter
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Iterator, Optional, Union

from .catalog import Lakehouse, PartitionKey
from .errors import InvalidPartitionKey, MalformedStream, ParseError
from .model import END_EXECUTION_KEY, DefinitionKind, IdKind, _canon, canonical_text, content_id
from .schema import IMPLEMENTATIONS, OBSERVATIONS, TESTS

Source = Union[str, os.PathLike, IO, Iterable[Union[str, bytes]]]

DEFAULT_BATCH_ROWS = 65536


@dataclass
class IngestBatchReport:
    table: str
    rows_read: int = 0
    rows_written: int = 0
    rows_deduplicated: int = 0
    rows_rejected: int = 0
    reject_reasons: Counter = field(default_factory=Counter)
    elapsed: float = 0.0
    parse_seconds: float = 0.0
    commit_seconds: float = 0.0
    snapshots: list[int] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.rows_read / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def conserved(self) -> bool:
        return self.rows_read == self.rows_written + self.rows_deduplicated + self.rows_rejected

    def reject(self, reason: str, n: int = 1) -> None:
        self.rows_rejected += n
        self.reject_reasons[reason] += n

    def to_dict(self) -> dict:
        return {
            "table": self.table,
            "rows_read": self.rows_read,
            "rows_written": self.rows_written,
            "rows_deduplicated": self.rows_deduplicated,
            "rows_rejected": self.rows_rejected,
            "reject_reasons": dict(sorted(self.reject_reasons.items())),
            "elapsed": round(self.elapsed, 6),
            "parse_seconds": round(self.parse_seconds, 6),
            "commit_seconds": round(self.commit_seconds, 6),
            "throughput": round(self.throughput, 1),
            "snapshots": self.snapshots,
        }


def _iter_lines(source: Source) -> Iterator[Union[str, bytes]]:
    if isinstance(source, (str, os.PathLike)):
        if str(source) == "-":
            import sys

            yield from _iter_lines(getattr(sys.stdin, "buffer", sys.stdin))
            return
        try:
            fh = open(source, "rb")
        except OSError as exc:
            raise MalformedStream(f"cannot open {source}: {exc}") from exc
        with fh:
            yield from _iter_lines(fh)
        return
    try:
        yield from source
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedStream(f"unreadable stream: {exc}") from exc


def _blank(line) -> bool:
    return not line.strip()


class _PartitionIndex:
    """Lazily loaded per-partition lookup state (aliases, existing keys)."""

    def __init__(self, lakehouse: Lakehouse):
        self.view = lakehouse.read_at()
        self.impls: dict[PartitionKey, dict[str, str]] = {}
        self.tests: dict[PartitionKey, dict[str, str]] = {}
        self.executions: dict[PartitionKey, set] = {}

    def _ids(self, table: str, idcol: str, key: PartitionKey) -> dict[str, str]:
        ids: dict[str, str] = {}
        aliases: dict[str, str] = {}
        for b in self.view.scan(table, [idcol, "alias"], key):
            for i, a in zip(b.columns[idcol], b.columns["alias"]):
                ids[i] = i
                if a is not None:
                    aliases.setdefault(a, i)
        # content ids win over aliases that happen to collide with them
        aliases.update(ids)
        return aliases

    def impl_map(self, key: PartitionKey) -> dict[str, str]:
        m = self.impls.get(key)
        if m is None:
            m = self.impls[key] = self._ids(IMPLEMENTATIONS, "implementation_id", key)
        return m

    def test_map(self, key: PartitionKey) -> dict[str, str]:
        m = self.tests.get(key)
        if m is None:
            m = self.tests[key] = self._ids(TESTS, "test_id", key)
        return m

    def execution_set(self, key: PartitionKey) -> set:
        s = self.executions.get(key)
        if s is None:
            s = set()
            for b in self.view.scan(OBSERVATIONS, ["implementation_id", "test_id", "execution_id"], key):
                s.update(zip(b.columns["implementation_id"], b.columns["test_id"], b.columns["execution_id"]))
            self.executions[key] = s
        return s


# --------------------------------------------------------------------------
# dimension tables
# --------------------------------------------------------------------------


def _opt_str(rec: dict, name: str) -> Optional[str]:
    v = rec.get(name)
    if v is not None and type(v) is not str:
        raise _Reject(f"invalid_field:{name}")
    return v


def _req_str(rec: dict, name: str) -> str:
    if name not in rec:
        raise _Reject(f"missing_field:{name}")
    v = rec[name]
    if type(v) is not str or not v:
        raise _Reject(f"invalid_field:{name}")
    return v


def _opt_metrics(rec: dict, name: str) -> Optional[dict]:
    v = rec.get(name)
    if v is None:
        return None
    if type(v) is not dict or not all(type(x) in (int, float) for x in v.values()):
        raise _Reject(f"invalid_field:{name}")
    return v


class _Reject(Exception):
    def __init__(self, reason: str):
        self.reason = reason


def _parse(line) -> dict:
    try:
        rec = json.loads(line)
    except ValueError:
        raise _Reject("malformed_json") from None
    if type(rec) is not dict:
        raise _Reject("malformed_json")
    return rec


def _ingest_dimension(lakehouse: Lakehouse, source: Source, table: str, kind: IdKind, build) -> IngestBatchReport:
    report = IngestBatchReport(table)
    t0 = time.perf_counter()
    index = _PartitionIndex(lakehouse)
    lookup = index.impl_map if kind is IdKind.IMPLEMENTATION else index.test_map
    idcol = "implementation_id" if kind is IdKind.IMPLEMENTATION else "test_id"
    pending: dict[PartitionKey, list[dict]] = {}
    for line in _iter_lines(source):
        if _blank(line):
            continue
        report.rows_read += 1
        try:
            rec = _parse(line)
            ds = _req_str(rec, "data_set_id")
            prob = _req_str(rec, "problem_id")
            row, payload = build(rec)
            alias = _opt_str(rec, "id")
            try:
                key = PartitionKey(ds, prob)
            except InvalidPartitionKey:
                raise _Reject("invalid_field:partition_key") from None
            cid = content_id(kind, payload)
        except _Reject as r:
            report.reject(r.reason)
            continue
        known = lookup(key)
        if cid in known:
            if alias is not None and known.get(alias, cid) != cid:
                report.reject("alias_conflict")
            else:
                report.rows_deduplicated += 1
            continue
        if alias is not None and alias in known:
            report.reject("alias_conflict")
            continue
        known[cid] = cid
        if alias is not None:
            known[alias] = cid
        row.update(data_set_id=ds, problem_id=prob, alias=alias)
        row[idcol] = cid
        pending.setdefault(key, []).append(row)
    t1 = time.perf_counter()
    report.parse_seconds = t1 - t0
    if pending:
        schema = lakehouse.current_schema(table)
        txn = lakehouse.begin_append(table)
        for key in sorted(pending):
            rows = sorted(pending[key], key=lambda r: r[idcol])
            cols = {n: [r.get(n) for r in rows] for n in schema.names}
            txn.stage_columns(key, cols, len(rows), schema)
        snap = txn.commit()
        report.snapshots.append(snap.snapshot_id)
        report.rows_written = txn.staged_rows
    report.commit_seconds = time.perf_counter() - t1
    report.elapsed = time.perf_counter() - t0
    return report


def _impl_row(rec: dict) -> tuple[dict, str]:
    src = _req_str(rec, "source_code")
    row = {
        "source_code": src,
        "language": _req_str(rec, "language"),
        "static_metrics": _opt_metrics(rec, "static_metrics"),
        "git_commit_hash": _opt_str(rec, "git_commit_hash"),
    }
    return row, src


def _test_row(rec: dict) -> tuple[dict, str]:
    definition = _req_str(rec, "definition")
    kind = _req_str(rec, "definition_kind")
    try:
        DefinitionKind(kind)
    except ValueError:
        raise _Reject("invalid_field:definition_kind") from None
    row = {"definition": definition, "definition_kind": kind, "language": _req_str(rec, "language")}
    return row, definition


def ingest_implementations(lakehouse: Lakehouse, source: Source) -> IngestBatchReport:
    """Bulk-import implementations; identical source in a partition is stored once."""
    return _ingest_dimension(lakehouse, source, IMPLEMENTATIONS, IdKind.IMPLEMENTATION, _impl_row)


def ingest_tests(lakehouse: Lakehouse, source: Source) -> IngestBatchReport:
    """Bulk-import test definitions (sequence sheets or mined unit tests)."""
    return _ingest_dimension(lakehouse, source, TESTS, IdKind.TEST, _test_row)


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------

_OBS_REQUIRED = (
    "data_set_id", "problem_id", "implementation_id", "test_id", "execution_id",
    "step_id", "operation", "inputs", "output", "language", "environment",
)


_OBS_FIELDS = itemgetter(*_OBS_REQUIRED)


class _Execution:
    __slots__ = ("key", "rows", "lang", "env", "git", "metrics", "conflict")

    def __init__(self, key, lang, env):
        self.key = key
        self.rows: list[tuple] = []
        self.lang = lang
        self.env = env
        self.git = None
        self.metrics = None
        self.conflict = False


def _diagnose(rec: dict) -> str:
    for name in _OBS_REQUIRED:
        if name not in rec:
            return f"missing_field:{name}"
    return "invalid_field"


class _ObservationIngest:
    def __init__(self, lakehouse: Lakehouse, batch_rows: int):
        if batch_rows < 1:
            raise ValueError("batch_rows must be positive")
        self.lakehouse = lakehouse
        self.batch_rows = batch_rows
        self.index = _PartitionIndex(lakehouse)
        self.report = IngestBatchReport(OBSERVATIONS)
        self.open: dict[tuple, _Execution] = {}
        self.open_by_id: dict[str, list[tuple]] = {}
        self.pending: dict[PartitionKey, list[_Execution]] = {}
        self.pending_rows = 0
        self.commit_seconds = 0.0
        self._pkeys: dict[tuple, PartitionKey] = {}

    def partition(self, ds: str, prob: str) -> Optional[PartitionKey]:
        k = self._pkeys.get((ds, prob))
        if k is None:
            try:
                k = PartitionKey(ds, prob)
            except InvalidPartitionKey:
                return None
            self._pkeys[(ds, prob)] = k
        return k

    def run(self, source: Source) -> IngestBatchReport:
        report = self.report
        t0 = time.perf_counter()
        loads = json.loads
        scan = json.JSONDecoder().scan_once
        canon = _canon
        fields = _OBS_FIELDS
        open_ = self.open
        last_pk = None
        last_ids = (None, None, None)
        for line in _iter_lines(source):
            if type(line) is bytes:
                try:
                    line = line.decode("utf-8")
                except UnicodeDecodeError:
                    report.rows_read += 1
                    report.reject("malformed_json")
                    continue
            try:
                rec, end = scan(line, 0)
                if end != len(line) and not line[end:].isspace():
                    raise ValueError
            except (StopIteration, ValueError):
                try:
                    rec = loads(line)
                except ValueError:
                    if _blank(line):
                        continue
                    report.rows_read += 1
                    report.reject("malformed_json")
                    continue
            if type(rec) is not dict:
                report.rows_read += 1
                report.reject("malformed_json")
                continue
            if END_EXECUTION_KEY in rec and len(rec) == 1:
                self.end_execution(rec[END_EXECUTION_KEY])
                continue
            report.rows_read += 1
            try:
                ds, prob, impl, test, exe, step, op, inputs, output, lang, env = fields(rec)
            except KeyError:
                report.reject(_diagnose(rec))
                continue
            git = rec.get("git_commit_hash")
            metrics = rec.get("metrics")
            if not (
                type(impl) is str and type(test) is str and type(exe) is str and exe
                and type(step) is int and step >= 0 and type(op) is str
                and type(inputs) is list and type(lang) is str and type(env) is str
                and (git is None or type(git) is str)
            ):
                report.reject("invalid_field")
                continue
            if (ds, prob) != last_pk:
                pk = self.partition(ds, prob) if type(ds) is str and type(prob) is str else None
                if pk is None:
                    report.reject("invalid_field:partition_key")
                    continue
                last_pk = (ds, prob)
                impl_map = self.index.impl_map(pk)
                test_map = self.index.test_map(pk)
                last_ids = (None, None, None)
            if last_ids[0] == impl and last_ids[1] == test:
                impl_id, test_id = last_ids[2]
            else:
                impl_id = impl_map.get(impl)
                if impl_id is None:
                    report.reject("dangling_reference:implementation_id")
                    continue
                test_id = test_map.get(test)
                if test_id is None:
                    report.reject("dangling_reference:test_id")
                    continue
                last_ids = (impl, test, (impl_id, test_id))
            try:
                in_c = canon(inputs)
                t = type(output)
                if t is bool:
                    out_c = "true" if output else "false"
                elif t is int:
                    out_c = str(output)
                elif output is None:
                    out_c = "null"
                else:
                    out_c = canon(output)
                if not (in_c.isascii() and out_c.isascii()):
                    in_c.encode("utf-8")
                    out_c.encode("utf-8")
            except (ParseError, UnicodeEncodeError):
                report.reject("invalid_value")
                continue
            key = (pk, impl_id, test_id, exe)
            ex = open_.get(key)
            if ex is None:
                ex = open_[key] = _Execution(key, lang, env)
                self.open_by_id.setdefault(exe, []).append(key)
            elif ex.lang != lang or ex.env != env:
                ex.conflict = True
            if git is not None:
                if ex.git is None:
                    ex.git = git
                elif ex.git != git:
                    ex.conflict = True
            if metrics is not None and metrics != ex.metrics:
                if type(metrics) is not dict or not all(type(x) in (int, float) for x in metrics.values()):
                    report.reject("invalid_field:metrics")
                    continue
                if ex.metrics is None:
                    ex.metrics = metrics
                else:
                    ex.conflict = True
            ex.rows.append((step, op, in_c, out_c))
        for key in list(open_):
            self.finish(open_.pop(key))
        self.open_by_id.clear()
        self.flush()
        report.elapsed = time.perf_counter() - t0
        report.commit_seconds = self.commit_seconds
        report.parse_seconds = report.elapsed - self.commit_seconds
        return report

    def end_execution(self, exe: Any) -> None:
        keys = self.open_by_id.pop(exe, None) if type(exe) is str else None
        for key in keys or ():
            ex = self.open.pop(key, None)
            if ex is not None:
                self.finish(ex)

    def finish(self, ex: _Execution) -> None:
        report = self.report
        rows = ex.rows
        n = len(rows)
        if not n:
            return  # every line of it was rejected
        if ex.conflict:
            report.reject("context_conflict", n)
            return
        if any(rows[i][0] != i for i in range(n)):
            rows.sort(key=lambda r: r[0])
            uniq = []
            for r in rows:
                if uniq and uniq[-1][0] == r[0]:
                    if uniq[-1] != r:
                        report.reject("step_conflict", n)
                        return
                    continue
                uniq.append(r)
            if any(uniq[i][0] != i for i in range(len(uniq))):
                report.reject("step_gap", n)
                return
            report.rows_deduplicated += n - len(uniq)
            ex.rows = rows = uniq
            n = len(rows)
        pk, impl_id, test_id, exe = ex.key
        existing = self.index.execution_set(pk)
        ekey = (impl_id, test_id, exe)
        if ekey in existing:
            report.rows_deduplicated += n
            return
        existing.add(ekey)
        self.pending.setdefault(pk, []).append(ex)
        self.pending_rows += n
        if self.pending_rows >= self.batch_rows:
            self.flush()

    def flush(self) -> None:
        if not self.pending:
            return
        t0 = time.perf_counter()
        lh = self.lakehouse
        schema = lh.current_schema(OBSERVATIONS)
        txn = lh.begin_append(OBSERVATIONS)
        for pk in sorted(self.pending):
            execs = sorted(self.pending[pk], key=lambda e: e.key[1:])
            impl_c, test_c, exe_c, lang_c, env_c, git_c, met_c = [], [], [], [], [], [], []
            step_c, op_c, in_c, out_c = [], [], [], []
            for ex in execs:
                _, impl_id, test_id, exe = ex.key
                n = len(ex.rows)
                steps, ops, ins, outs = zip(*ex.rows)
                step_c.extend(steps)
                op_c.extend(ops)
                in_c.extend(ins)
                out_c.extend(outs)
                impl_c.extend([impl_id] * n)
                test_c.extend([test_id] * n)
                exe_c.extend([exe] * n)
                lang_c.extend([ex.lang] * n)
                env_c.extend([ex.env] * n)
                git_c.extend([ex.git] * n)
                met_c.extend([None if ex.metrics is None else canonical_text(ex.metrics)] * n)
            total = len(step_c)
            cols = {
                "data_set_id": [pk.data_set_id] * total,
                "problem_id": [pk.problem_id] * total,
                "implementation_id": impl_c,
                "test_id": test_c,
                "execution_id": exe_c,
                "step_id": step_c,
                "operation": op_c,
                "inputs": in_c,
                "output": out_c,
                "language": lang_c,
                "environment": env_c,
                "git_commit_hash": git_c,
                "metrics": met_c,
            }
            txn.stage_columns(pk, cols, total, schema)
        snap = txn.commit()
        self.report.snapshots.append(snap.snapshot_id)
        self.report.rows_written += txn.staged_rows
        self.pending.clear()
        self.pending_rows = 0
        self.commit_seconds += time.perf_counter() - t0


def ingest_observations(lakehouse: Lakehouse, source: Source, batch_rows: int = DEFAULT_BATCH_ROWS) -> IngestBatchReport:
    """Stream invocation step records into the observations table."""
    return _ObservationIngest(lakehouse, batch_rows).run(source)
