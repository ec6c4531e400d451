"""Stimulus-response matrix views and the analytics built on them.

Every operation works on one partition (data_set_id, problem_id) of a
:class:`~obslake.catalog.ReadView` and only ever opens that partition's
segment files.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

from .catalog import PartitionKey, ReadView
from .errors import EmptyCommonTestSet, ReferentialGap, UnknownCommit, UnknownImplementation
from .model import (
    DEFAULT_EQUIVALENCE,
    DefinitionKind,
    EquivalenceConfig,
    ExceptionMode,
    ImplementationRecord,
    TestRecord,
    normalize_output,
    output_equivalent,
)
from .schema import BASELINE_SCHEMAS, IMPLEMENTATIONS, OBSERVATIONS, TESTS

# marks a (test, implementation) pair without observations inside a trace
ABSENT = "\x00absent"


class ViewMode(str, enum.Enum):
    OUTPUT = "output_view"
    FULL = "full_view"
    JOINED = "joined_view"


@dataclass
class StepCell:
    step_id: int
    output: str
    operation: Optional[str] = None
    inputs: Optional[list[str]] = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"step_id": self.step_id}
        if self.operation is not None:
            d["operation"] = self.operation
            d["inputs"] = self.inputs
        d["output"] = self.output
        return d


@dataclass
class Cell:
    """Steps of the latest execution of one (test, implementation) pair."""

    execution_id: str
    steps: list[StepCell]
    executions: int = 1


@dataclass
class SRMView:
    partition: PartitionKey
    mode: ViewMode
    rows: list[str]
    columns: list[str]
    cells: dict[tuple[str, str], Optional[Cell]]
    snapshot_id: Optional[int] = None
    implementations: dict[str, ImplementationRecord] = field(default_factory=dict)
    tests: dict[str, TestRecord] = field(default_factory=dict)

    def cell(self, test_id: str, implementation_id: str) -> Optional[Cell]:
        return self.cells[(test_id, implementation_id)]

    @property
    def step_count(self) -> int:
        return sum(len(c.steps) for c in self.cells.values() if c is not None)

    def to_dict(self) -> dict:
        cells = []
        for t in self.rows:
            for i in self.columns:
                c = self.cells[(t, i)]
                if c is None:
                    cells.append({"test_id": t, "implementation_id": i, "absent": True})
                else:
                    cells.append({
                        "test_id": t,
                        "implementation_id": i,
                        "absent": False,
                        "execution_id": c.execution_id,
                        "executions": c.executions,
                        "steps": [s.to_dict() for s in c.steps],
                    })
        d = {
            "partition": self.partition.to_dict(),
            "mode": self.mode.value,
            "snapshot_id": self.snapshot_id,
            "rows": self.rows,
            "columns": self.columns,
            "cells": cells,
        }
        if self.mode is ViewMode.JOINED:
            d["implementations"] = {k: v.to_dict() for k, v in sorted(self.implementations.items())}
            d["tests"] = {k: v.to_dict() for k, v in sorted(self.tests.items())}
        return d


# --------------------------------------------------------------------------
# partition loading
# --------------------------------------------------------------------------


class _Executions:
    """Observation rows of one partition grouped by (test, impl, execution)."""

    def __init__(self, view: ReadView, key: PartitionKey, full: bool = False, with_commit: bool = False):
        cols = ["implementation_id", "test_id", "execution_id", "step_id", "output"]
        if full:
            cols += ["operation", "inputs"]
        if with_commit:
            cols.append("git_commit_hash")
        # (test, impl, execution) -> [order, steps, commit]
        groups: dict[tuple, list] = {}
        for b in view.scan(OBSERVATIONS, cols, key):
            order = b.segment.added_snapshot or 0
            c = b.columns
            commits = c["git_commit_hash"] if with_commit else [None] * b.num_rows
            if full:
                payload = zip(c["step_id"], c["output"], c["operation"], c["inputs"])
            else:
                payload = zip(c["step_id"], c["output"])
            for i, t, e, p, g in zip(c["implementation_id"], c["test_id"], c["execution_id"], payload, commits):
                k = (t, i, e)
                ent = groups.get(k)
                if ent is None:
                    groups[k] = ent = [order, [], g]
                ent[1].append(p)
        for ent in groups.values():
            steps = ent[1]
            if any(steps[j][0] != j for j in range(len(steps))):
                steps.sort(key=lambda s: s[0])
        self.groups = groups
        self.full = full

    def implementations(self) -> list[str]:
        return sorted({k[1] for k in self.groups})

    def tests(self) -> list[str]:
        return sorted({k[0] for k in self.groups})

    def latest(self, exclude: Optional[str] = None, commit: Optional[str] = None) -> dict[tuple[str, str], tuple[str, list, int]]:
        """(test, impl) -> (execution_id, steps, execution count), latest execution winning."""
        best: dict[tuple[str, str], list] = {}
        for (t, i, e), (order, steps, g) in self.groups.items():
            if i == exclude or (commit is not None and g != commit):
                continue
            k = (t, i)
            cur = best.get(k)
            if cur is None:
                best[k] = [(order, e), steps, 1]
            else:
                cur[2] += 1
                if (order, e) > cur[0]:
                    cur[0], cur[1] = (order, e), steps
        return {k: (v[0][1], v[1], v[2]) for k, v in best.items()}

    def traces(self, mode: ExceptionMode) -> dict[str, list[str]]:
        """Per implementation: outputs ordered by (test, execution, step), with absence sentinels."""
        tests = self.tests()
        per_impl: dict[str, dict[str, list]] = {}
        for (t, i, e) in sorted(self.groups):
            per_impl.setdefault(i, {}).setdefault(t, []).append(self.groups[(t, i, e)][1])
        norm = _Normalizer(mode)
        out = {}
        for i in sorted(per_impl):
            by_test = per_impl[i]
            trace: list[str] = []
            for t in tests:
                execs = by_test.get(t)
                if execs is None:
                    trace.append(ABSENT + t)
                    continue
                trace.append("\x01" + t)
                for steps in execs:
                    trace.append("\x02")
                    trace.extend(norm(s[1]) for s in steps)
            out[i] = trace
        return out


class _Normalizer:
    def __init__(self, mode: ExceptionMode):
        self.mode = mode
        self.cache: dict[str, str] = {}

    def __call__(self, text: str) -> str:
        if self.mode is ExceptionMode.EXACT:
            return text
        v = self.cache.get(text)
        if v is None:
            v = self.cache[text] = normalize_output(text, self.mode)
        return v


def _inputs_list(text: str, cache: dict) -> list[str]:
    v = cache.get(text)
    if v is None:
        from .model import canonical_text

        v = cache[text] = [canonical_text(x) for x in json.loads(text)]
    return v


def _build_view(view: ReadView, key: PartitionKey, mode: ViewMode) -> tuple[SRMView, _Executions]:
    ex = _Executions(view, key, full=mode is not ViewMode.OUTPUT)
    latest = ex.latest()
    rows, columns = ex.tests(), ex.implementations()
    cells: dict[tuple[str, str], Optional[Cell]] = {}
    icache: dict = {}
    for t in rows:
        for i in columns:
            got = latest.get((t, i))
            if got is None:
                cells[(t, i)] = None
                continue
            e, steps, n = got
            if mode is ViewMode.OUTPUT:
                sc = [StepCell(s[0], s[1]) for s in steps]
            else:
                sc = [StepCell(s[0], s[1], s[2], _inputs_list(s[3], icache)) for s in steps]
            cells[(t, i)] = Cell(e, sc, n)
    return SRMView(key, mode, rows, columns, cells, view.snapshot_id), ex


def srm_output_view(view: ReadView, key: PartitionKey) -> SRMView:
    """Tests x implementations matrix of output traces for one partition."""
    return _build_view(view, key, ViewMode.OUTPUT)[0]


def srm_full_view(view: ReadView, key: PartitionKey) -> SRMView:
    """Like the output view, with operation and inputs on every step."""
    return _build_view(view, key, ViewMode.FULL)[0]


def srm_joined_view(view: ReadView, key: PartitionKey) -> SRMView:
    """Full view joined with the partition's implementation and test rows."""
    srm, _ = _build_view(view, key, ViewMode.JOINED)
    srm.mode = ViewMode.JOINED
    base_i = {f.name for f in BASELINE_SCHEMAS[IMPLEMENTATIONS].fields}
    base_t = {f.name for f in BASELINE_SCHEMAS[TESTS].fields}
    impls = {}
    for r in view.rows(IMPLEMENTATIONS, key):
        impls[r["implementation_id"]] = ImplementationRecord(
            r["data_set_id"], r["problem_id"], r["implementation_id"], r["source_code"], r["language"],
            r["static_metrics"] or {}, r["git_commit_hash"], r["alias"],
            {k: v for k, v in r.items() if k not in base_i},
        )
    tests = {}
    for r in view.rows(TESTS, key):
        tests[r["test_id"]] = TestRecord(
            r["data_set_id"], r["problem_id"], r["test_id"], r["definition"],
            DefinitionKind(r["definition_kind"]), r["language"], r["alias"],
            {k: v for k, v in r.items() if k not in base_t},
        )
    missing_i = [i for i in srm.columns if i not in impls]
    missing_t = [t for t in srm.rows if t not in tests]
    if missing_i or missing_t:
        raise ReferentialGap(
            f"observations reference missing dimension rows: implementations={missing_i[:5]} tests={missing_t[:5]}"
        )
    srm.implementations = {i: impls[i] for i in srm.columns}
    srm.tests = {t: tests[t] for t in srm.rows}
    return srm


# --------------------------------------------------------------------------
# fingerprints and clusters
# --------------------------------------------------------------------------


@dataclass
class BehaviorFingerprint:
    implementation_id: str
    digest: str
    trace_length: int

    def to_dict(self) -> dict:
        return {"implementation_id": self.implementation_id, "digest": self.digest, "trace_length": self.trace_length}


@dataclass
class BehaviorCluster:
    class_id: int
    members: list[str]
    representative: str
    digest: str

    @property
    def size(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "size": self.size,
            "representative": self.representative,
            "digest": self.digest,
            "members": self.members,
        }


def _digest(trace: Sequence[str]) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update("\n".join(trace).encode("utf-8"))
    return h.hexdigest()


def _trace_length(trace: Sequence[str]) -> int:
    return sum(1 for x in trace if x[:1] not in ("\x00", "\x01", "\x02"))


def fingerprint_implementations(
    view: ReadView, key: PartitionKey, cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE
) -> list[BehaviorFingerprint]:
    """One digest per implementation over its complete, ordered output trace."""
    traces = _Executions(view, key).traces(cfg.exception_mode)
    return [BehaviorFingerprint(i, _digest(tr), _trace_length(tr)) for i, tr in traces.items()]


def _traces_equivalent(a: list[str], b: list[str], cfg: EquivalenceConfig) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x == y:
            continue
        if x[:1] in ("\x00", "\x01", "\x02") or y[:1] in ("\x00", "\x01", "\x02"):
            return False
        if not output_equivalent(x, y, cfg):
            return False
    return True


def _order_clusters(groups: list[list[str]], digests: dict[str, str]) -> list[BehaviorCluster]:
    groups = [sorted(g) for g in groups]
    groups.sort(key=lambda g: (-len(g), g[0]))
    return [BehaviorCluster(n, g, g[0], digests[g[0]]) for n, g in enumerate(groups)]


def cluster_implementations(
    view: ReadView, key: PartitionKey, cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE
) -> list[BehaviorCluster]:
    """Partition implementations into behavioral equivalence classes.

    With zero tolerance the classes are exact fingerprint groups. With a
    positive tolerance equivalence is not transitive, so implementations are
    visited in id order and each joins the first cluster whose representative
    it matches; the result depends on that order.
    """
    traces = _Executions(view, key).traces(cfg.exception_mode)
    digests = {i: _digest(tr) for i, tr in traces.items()}
    if cfg.float_tolerance == 0:
        by_digest: dict[str, list[str]] = {}
        for i in sorted(traces):
            by_digest.setdefault(digests[i], []).append(i)
        return _order_clusters(list(by_digest.values()), digests)
    reps: list[tuple[str, list[str]]] = []
    for i in sorted(traces):
        for rep, members in reps:
            if _traces_equivalent(traces[rep], traces[i], cfg):
                members.append(i)
                break
        else:
            reps.append((i, [i]))
    return _order_clusters([m for _, m in reps], digests)


# --------------------------------------------------------------------------
# consensus and assessment
# --------------------------------------------------------------------------


@dataclass
class OracleCell:
    majority_output: str
    support: int
    total: int
    tied: bool

    def to_dict(self) -> dict:
        return {"majority_output": self.majority_output, "support": self.support, "total": self.total,
                "tied": self.tied}


@dataclass
class ConsensusOracle:
    partition: PartitionKey
    cells: dict[tuple[str, int], OracleCell]
    implementations: int = 0
    snapshot_id: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "partition": self.partition.to_dict(),
            "snapshot_id": self.snapshot_id,
            "implementations": self.implementations,
            "cells": [{"test_id": t, "step_id": s, **c.to_dict()} for (t, s), c in sorted(self.cells.items())],
        }


def majority_vote(outputs: Iterable[str], cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE) -> OracleCell:
    """Majority over one vote per output; ties go to the smallest canonical text."""
    counts: dict[str, int] = {}
    total = 0
    for o in outputs:
        counts[o] = counts.get(o, 0) + 1
        total += 1
    if cfg.float_tolerance > 0 and len(counts) > 1:
        merged: list[list] = []
        for o in sorted(counts):
            for grp in merged:
                if output_equivalent(grp[0], o, cfg):
                    grp[1] += counts[o]
                    break
            else:
                merged.append([o, counts[o]])
        counts = {o: n for o, n in merged}
    top = max(counts.values())
    winners = sorted(o for o, n in counts.items() if n == top)
    return OracleCell(winners[0], top, total, len(winners) > 1)


def _oracle_from(latest: dict, cfg: EquivalenceConfig) -> dict[tuple[str, int], OracleCell]:
    norm = _Normalizer(cfg.exception_mode)
    votes: dict[tuple[str, int], list[str]] = {}
    for (t, _i), (_e, steps, _n) in latest.items():
        for s in steps:
            votes.setdefault((t, s[0]), []).append(norm(s[1]))
    return {k: majority_vote(v, cfg) for k, v in votes.items()}


def consensus_oracle(
    view: ReadView, key: PartitionKey, cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE
) -> ConsensusOracle:
    """Per (test, step) majority output, one vote per implementation (latest execution)."""
    ex = _Executions(view, key)
    cells = _oracle_from(ex.latest(), cfg)
    return ConsensusOracle(key, cells, len(ex.implementations()), view.snapshot_id)


class Verdict(str, enum.Enum):
    AGREE = "agree"
    DEVIATE = "deviate"
    MISSING = "missing"


@dataclass
class AssessmentReport:
    partition: PartitionKey
    subject: str
    verdicts: dict[tuple[str, int], Verdict]
    snapshot_id: Optional[int] = None

    def count(self, v: Verdict) -> int:
        return sum(1 for x in self.verdicts.values() if x is v)

    @property
    def agreement_ratio(self) -> Optional[float]:
        agree, dev = self.count(Verdict.AGREE), self.count(Verdict.DEVIATE)
        return agree / (agree + dev) if agree + dev else None

    def to_dict(self) -> dict:
        return {
            "partition": self.partition.to_dict(),
            "snapshot_id": self.snapshot_id,
            "subject": self.subject,
            "agree": self.count(Verdict.AGREE),
            "deviate": self.count(Verdict.DEVIATE),
            "missing": self.count(Verdict.MISSING),
            "agreement_ratio": self.agreement_ratio,
            "cells": [{"test_id": t, "step_id": s, "verdict": v.value} for (t, s), v in sorted(self.verdicts.items())],
        }


def nversion_assess(
    view: ReadView, key: PartitionKey, cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE, subject: str = ""
) -> AssessmentReport:
    """Compare ``subject`` cell by cell with the consensus of all other implementations.

    ``subject`` may be a content id or an alias.
    """
    ex = _Executions(view, key)
    if subject not in ex.implementations():
        aliases = {r["alias"]: r["implementation_id"] for r in view.rows(IMPLEMENTATIONS, key) if r["alias"]}
        subject = aliases.get(subject, subject)
    if subject not in ex.implementations():
        raise UnknownImplementation(f"{subject!r} has no observations in {key}")
    oracle = _oracle_from(ex.latest(exclude=subject), cfg)
    mine: dict[tuple[str, int], str] = {}
    for (t, i), (_e, steps, _n) in ex.latest().items():
        if i == subject:
            for s in steps:
                mine[(t, s[0])] = s[1]
    norm = _Normalizer(cfg.exception_mode)
    verdicts = {}
    for cell, oc in oracle.items():
        out = mine.get(cell)
        if out is None:
            verdicts[cell] = Verdict.MISSING
        elif output_equivalent(norm(out), oc.majority_output, cfg):
            verdicts[cell] = Verdict.AGREE
        else:
            verdicts[cell] = Verdict.DEVIATE
    return AssessmentReport(key, subject, verdicts, view.snapshot_id)


# --------------------------------------------------------------------------
# behavioral drift
# --------------------------------------------------------------------------


@dataclass
class CommitFingerprint:
    commit: str
    digest: str
    trace_length: int
    implementations: list[str]

    def to_dict(self) -> dict:
        return {"commit": self.commit, "digest": self.digest, "trace_length": self.trace_length,
                "implementations": self.implementations}


@dataclass
class DriftReport:
    partition: PartitionKey
    commits: list[CommitFingerprint]
    drift_pairs: list[tuple[str, str]]
    common_tests: list[str]
    snapshot_id: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "partition": self.partition.to_dict(),
            "snapshot_id": self.snapshot_id,
            "commits": [c.to_dict() for c in self.commits],
            "drift_pairs": [list(p) for p in self.drift_pairs],
            "common_tests": self.common_tests,
        }


def behavioral_drift(
    view: ReadView, key: PartitionKey, cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE,
    lineage: Sequence[str] = (),
) -> DriftReport:
    """Fingerprint each commit on the tests shared by the whole lineage; flag adjacent changes.

    An observation belongs to a commit through its own git_commit_hash, or
    failing that through its implementation's. Per test the latest
    execution counts.
    """
    ex = _Executions(view, key, with_commit=True)
    impl_commit = {r["implementation_id"]: r["git_commit_hash"]
                   for r in view.rows(IMPLEMENTATIONS, key) if r["git_commit_hash"] is not None}
    per_commit = {}
    for c in lineage:
        latest_per_test: dict[str, tuple] = {}
        impls = set()
        for (t, i, e), (order, steps, g) in ex.groups.items():
            if (g if g is not None else impl_commit.get(i)) != c:
                continue
            impls.add(i)
            cur = latest_per_test.get(t)
            if cur is None or (order, e, i) > cur[0]:
                latest_per_test[t] = ((order, e, i), steps)
        if not latest_per_test:
            raise UnknownCommit(f"no observations for commit {c!r} in {key}")
        per_commit[c] = (latest_per_test, sorted(impls))
    if not lineage:
        return DriftReport(key, [], [], [], view.snapshot_id)
    common = set.intersection(*(set(v[0]) for v in per_commit.values()))
    if not common:
        raise EmptyCommonTestSet("commits share no tests")
    tests = sorted(common)
    norm = _Normalizer(cfg.exception_mode)
    traces = {}
    prints = []
    for c in lineage:
        by_test, impls = per_commit[c]
        trace: list[str] = []
        for t in tests:
            trace.append("\x01" + t)
            trace.extend(norm(s[1]) for s in by_test[t][1])
        traces[c] = trace
        prints.append(CommitFingerprint(c, _digest(trace), _trace_length(trace), impls))
    pairs = []
    for a, b in zip(lineage, lineage[1:]):
        same = traces[a] == traces[b] if cfg.float_tolerance == 0 else _traces_equivalent(traces[a], traces[b], cfg)
        if not same:
            pairs.append((a, b))
    return DriftReport(key, prints, pairs, tests, view.snapshot_id)
