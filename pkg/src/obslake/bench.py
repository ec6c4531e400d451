"""Desk-scale benchmark: ingest throughput, storage footprint and query latency.

Cold cache here means a freshly opened lakehouse handle per repetition; the
OS page cache is left alone.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import mean
from typing import Callable, Optional

from .catalog import Lakehouse, PartitionKey, ReadView, list_partitions, open_lakehouse
from .ingest import IngestBatchReport, ingest_implementations, ingest_observations, ingest_tests
from .schema import IMPLEMENTATIONS, OBSERVATIONS, TABLES, TESTS
from .srm import cluster_implementations, srm_joined_view, srm_output_view
from .workload import Workload, generate_workload

QUERIES: dict[str, Callable] = {
    "q1_output_view": srm_output_view,
    "q2_clustering": cluster_implementations,
    "q3_joined_view": srm_joined_view,
}

TARGETS_MS = {"q1_output_view": 200.0, "q2_clustering": 150.0, "q3_joined_view": 300.0}


@dataclass
class QueryStats:
    name: str
    per_problem_ms: dict[str, float]
    target_ms: float

    @property
    def mean_ms(self) -> float:
        return mean(self.per_problem_ms.values()) if self.per_problem_ms else 0.0

    @property
    def max_ms(self) -> float:
        return max(self.per_problem_ms.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "mean_ms": round(self.mean_ms, 3),
            "max_ms": round(self.max_ms, 3),
            "target_ms": self.target_ms,
            "per_problem_ms": {k: round(v, 3) for k, v in self.per_problem_ms.items()},
        }


@dataclass
class BenchReport:
    problems: int
    seed: int
    repetitions: int
    observation_rows: int
    implementations: int
    tests: int
    sequences: int
    generation_seconds: float
    ingest: dict[str, IngestBatchReport]
    table_bytes: dict[str, int]
    queries: dict[str, QueryStats]
    pruning_violations: list[str]
    pruning_checked: int
    cluster_sizes: dict[str, list[int]]
    planted_sizes: dict[str, list[int]]
    result_digest: str
    total_seconds: float = 0.0
    concurrent: Optional[dict] = None

    @property
    def ingest_throughput(self) -> float:
        return self.ingest[OBSERVATIONS].throughput

    @property
    def bytes_per_row(self) -> float:
        n = self.ingest[OBSERVATIONS].rows_written
        return self.table_bytes[OBSERVATIONS] / n if n else 0.0

    @property
    def pruning_ok(self) -> bool:
        return not self.pruning_violations and self.pruning_checked > 0

    @property
    def clusters_match_truth(self) -> bool:
        return self.cluster_sizes == self.planted_sizes

    def to_dict(self) -> dict:
        return {
            "problems": self.problems,
            "seed": self.seed,
            "repetitions": self.repetitions,
            "workload": {
                "observation_rows": self.observation_rows,
                "implementations": self.implementations,
                "tests": self.tests,
                "sequences": self.sequences,
                "generation_seconds": round(self.generation_seconds, 3),
            },
            "ingest": {t: r.to_dict() for t, r in self.ingest.items()},
            "ingest_throughput": round(self.ingest_throughput, 1),
            "storage": {
                "table_bytes": self.table_bytes,
                "observation_bytes_per_row": round(self.bytes_per_row, 3),
            },
            "queries": {n: q.to_dict() for n, q in self.queries.items()},
            "pruning": {
                "checked": self.pruning_checked,
                "violations": self.pruning_violations,
                "ok": self.pruning_ok,
            },
            "clusters_match_truth": self.clusters_match_truth,
            "result_digest": self.result_digest,
            "total_seconds": round(self.total_seconds, 3),
            "concurrent": self.concurrent,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render(self) -> str:
        obs = self.ingest[OBSERVATIONS]
        lines = [
            f"workload: {self.problems} problems, seed {self.seed}",
            f"  rows {self.observation_rows:,}  impls {self.implementations:,}  tests {self.tests:,}"
            f"  sequences {self.sequences:,}  generated in {self.generation_seconds:.2f}s",
            f"ingest: {obs.rows_written:,} rows in {obs.elapsed:.2f}s = {obs.throughput:,.0f} rows/s"
            f" (parse {obs.parse_seconds:.2f}s, commit {obs.commit_seconds:.2f}s)",
            f"storage: observations {self.table_bytes[OBSERVATIONS]:,} B = {self.bytes_per_row:.2f} B/row",
            f"queries ({self.repetitions} cold repetitions, per-problem mean):",
        ]
        for n, q in self.queries.items():
            flag = "ok" if q.mean_ms < q.target_ms else "SLOW"
            lines.append(f"  {n:<16} mean {q.mean_ms:8.2f} ms  max {q.max_ms:8.2f} ms  target < {q.target_ms:.0f} ms  {flag}")
        lines.append(f"pruning: {self.pruning_checked} queries checked,"
                     f" {len(self.pruning_violations)} violations")
        lines.append(f"clusters match planted classes: {self.clusters_match_truth}")
        if self.concurrent:
            c = self.concurrent
            lines.append(f"concurrent ingest: {c['writers']} writers, {c['rows_written']:,} rows,"
                         f" {c['snapshots']} snapshots in {c['elapsed']:.2f}s")
        lines.append(f"total: {self.total_seconds:.1f}s")
        return "\n".join(lines)


def _table_bytes(view: ReadView) -> dict[str, int]:
    return {t: sum(p.byte_size for p in list_partitions(view, t)) for t in TABLES}


def _check_pruning(lh: Lakehouse, view: ReadView, key: PartitionKey, opened: list[str]) -> Optional[str]:
    allowed = {seg.path for t in TABLES for seg in view.segments(t, key)}
    stray = [p for p in opened if p not in allowed]
    if stray:
        return f"{key.problem_id}: opened {len(stray)} foreign segment(s), e.g. {stray[0]}"
    if not opened:
        return f"{key.problem_id}: opened no segments"
    return None


def _digest_results(view: ReadView, keys: list[PartitionKey]) -> tuple[str, dict[str, list[int]]]:
    h = hashlib.sha256()
    sizes = {}
    for k in keys:
        srm = srm_output_view(view, k)
        clusters = cluster_implementations(view, k)
        sizes[k.problem_id] = [c.size for c in clusters]
        h.update(json.dumps(srm.to_dict()["cells"], sort_keys=True).encode())
        h.update(json.dumps([c.to_dict() for c in clusters], sort_keys=True).encode())
    return h.hexdigest(), sizes


def _concurrent_ingest(workload: Workload, writers: int) -> dict:
    """Ingest the observation stream split across writer threads into a scratch lakehouse."""
    with tempfile.TemporaryDirectory(prefix="obslake-conc-") as tmp:
        lh = open_lakehouse(tmp, create_if_missing=True, durable=False)
        ingest_implementations(lh, workload.implementation_lines())
        ingest_tests(lh, workload.test_lines())
        base = lh.latest_snapshot_id()
        plans = workload.plans
        shares = [plans[w::writers] for w in range(writers)]
        reports: list[IngestBatchReport] = [None] * writers  # type: ignore[list-item]
        errors: list[BaseException] = []

        def work(w: int) -> None:
            def lines():
                for plan in shares[w]:
                    yield from plan.observation_lines(plan.build())
            try:
                reports[w] = ingest_observations(lh, lines())
            except BaseException as exc:  # surfaced after join
                errors.append(exc)

        t0 = time.perf_counter()
        threads = [threading.Thread(target=work, args=(w,)) for w in range(writers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - t0
        if errors:
            raise errors[0]
        view = lh.read_at()
        written = sum(r.rows_written for r in reports)
        return {
            "writers": writers,
            "rows_written": written,
            "rows_in_table": view.row_count(OBSERVATIONS),
            "snapshots": lh.latest_snapshot_id() - base,
            "commits": sum(len(r.snapshots) for r in reports),
            "elapsed": elapsed,
        }


def run_benchmark(
    problems: int = 50,
    seed: int = 1,
    repetitions: int = 10,
    root: Optional[str | os.PathLike] = None,
    concurrent_writers: int = 0,
    keep: bool = False,
) -> BenchReport:
    """Generate, ingest and query a synthetic workload; returns the measurements.

    ``root`` defaults to a temporary directory that is removed afterwards
    unless ``keep`` is set.
    """
    if problems < 1:
        raise ValueError("problems must be >= 1")
    t_start = time.perf_counter()
    own = root is None
    base = Path(tempfile.mkdtemp(prefix="obslake-bench-")) if own else Path(root)
    try:
        workload = generate_workload(problems, seed)
        t0 = time.perf_counter()
        paths = workload.write(base / "workload")
        gen_seconds = time.perf_counter() - t0
        truth = json.loads(paths["truth"].read_text())["problems_truth"]

        lh_root = base / "lakehouse"
        if lh_root.exists():
            shutil.rmtree(lh_root)
        lh = open_lakehouse(lh_root, create_if_missing=True)
        ingest = {
            IMPLEMENTATIONS: ingest_implementations(lh, paths["implementations"]),
            TESTS: ingest_tests(lh, paths["tests"]),
            OBSERVATIONS: ingest_observations(lh, paths["observations"]),
        }
        sid = lh.latest_snapshot_id()
        view = lh.read_at(sid)
        keys = sorted(view.partition_map(OBSERVATIONS))
        table_bytes = _table_bytes(view)

        timings: dict[str, dict[str, list[float]]] = {n: {} for n in QUERIES}
        violations: list[str] = []
        checked = 0
        for _ in range(repetitions):
            for name, fn in QUERIES.items():
                for k in keys:
                    fresh = open_lakehouse(lh_root)
                    v = fresh.read_at(sid)
                    fresh.io.reset()
                    t = time.perf_counter()
                    fn(v, k)
                    timings[name].setdefault(k.problem_id, []).append(time.perf_counter() - t)
                    msg = _check_pruning(fresh, v, k, list(fresh.io.opened_paths))
                    checked += 1
                    if msg:
                        violations.append(f"{name} {msg}")
        queries = {
            n: QueryStats(n, {p: mean(ts) * 1000 for p, ts in per.items()}, TARGETS_MS[n])
            for n, per in timings.items()
        }
        digest, sizes = _digest_results(view, keys)
        planted = {p: t["class_sizes"] for p, t in truth.items()}
        report = BenchReport(
            problems=problems,
            seed=seed,
            repetitions=repetitions,
            observation_rows=workload.observation_rows,
            implementations=workload.implementations,
            tests=workload.tests,
            sequences=workload.sequences,
            generation_seconds=gen_seconds,
            ingest=ingest,
            table_bytes=table_bytes,
            queries=queries,
            pruning_violations=violations,
            pruning_checked=checked,
            cluster_sizes=sizes,
            planted_sizes=planted,
            result_digest=digest,
        )
        if concurrent_writers > 1:
            report.concurrent = _concurrent_ingest(workload, concurrent_writers)
        report.total_seconds = time.perf_counter() - t_start
        return report
    finally:
        if own and not keep:
            shutil.rmtree(base, ignore_errors=True)
