"""Shared test helpers and brute-force reference implementations."""

import hashlib
import json
from pathlib import Path

from obslake.catalog import begin_append, commit, open_lakehouse, stage_rows
from obslake.model import END_EXECUTION_KEY, ExceptionMode, IdKind, canonical_text, content_id, normalize_output, output_equivalent
from obslake.schema import OBSERVATIONS, TABLES
from obslake.segment import load_segment


def obs_rows(ds, prob, n, tag="e", start=0):
    return [
        {
            "data_set_id": ds, "problem_id": prob, "implementation_id": "impl_1", "test_id": "test_1",
            "execution_id": f"{tag}{(start + i) // 10}", "step_id": (start + i) % 10, "operation": "op",
            "inputs": "[]", "output": str(start + i), "language": "java", "environment": "env",
            "git_commit_hash": None, "metrics": {"wall": 1.0},
        }
        for i in range(n)
    ]


def append(lh, ds, prob, n, **kw):
    txn = begin_append(lh, OBSERVATIONS)
    stage_rows(txn, obs_rows(ds, prob, n, **kw))
    return commit(txn)


def scan_digest(view, table=OBSERVATIONS, key=None):
    h = hashlib.sha256()
    for b in view.scan(table, key=key):
        h.update(json.dumps(b.columns, sort_keys=True, default=str).encode())
    return h.hexdigest()


def segment_files(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for t in TABLES for p in (root / t).rglob("*.seg")} if root.exists() else {}


class Boom(Exception):
    pass


def assert_consistent(root: Path):
    lh = open_lakehouse(root)
    ids = lh.snapshot_ids()
    assert ids == list(range(1, len(ids) + 1))
    for sid in ids:
        snap = lh.load_snapshot(sid)
        for t in TABLES:
            for segs in snap.manifest.get(t, {}).values():
                for s in segs:
                    assert load_segment(s.path).checksum == s.checksum
        if sid > 1:
            assert snap.parent_id == sid - 1
    assert not list((root / "metadata").glob(".*tmp"))
    return lh


class Reference:
    """Brute-force SRM facts computed straight from the JSONL streams.

    ``workload`` is anything with implementation_lines/test_lines/observation_lines.
    """

    def __init__(self, workload):
        self.alias = {}
        self.source = {}
        self.definition = {}
        for line in workload.implementation_lines():
            r = json.loads(line)
            cid = content_id(IdKind.IMPLEMENTATION, r["source_code"])
            self.alias[(r["problem_id"], r["id"])] = cid
            self.source[(r["problem_id"], cid)] = r["source_code"]
        for line in workload.test_lines():
            r = json.loads(line)
            cid = content_id(IdKind.TEST, r["definition"])
            self.alias[(r["problem_id"], r["id"])] = cid
            self.definition[(r["problem_id"], cid)] = r["definition"]
        self.steps = {}  # prob -> {(test, impl, exe): {step: output}}
        for line in workload.observation_lines():
            r = json.loads(line)
            if END_EXECUTION_KEY in r:
                continue
            p = r["problem_id"]
            k = (self.alias[(p, r["test_id"])], self.alias[(p, r["implementation_id"])], r["execution_id"])
            self.steps.setdefault(p, {}).setdefault(k, {})[r["step_id"]] = canonical_text(r["output"])

    def problems(self):
        return sorted(self.steps)

    def cells(self, prob):
        out = {}
        for (t, i, e), steps in self.steps[prob].items():
            out.setdefault((t, i), []).append((e, [steps[s] for s in sorted(steps)]))
        return {k: max(v)[1] for k, v in out.items()}

    def traces(self, prob, mode=ExceptionMode.EXACT):
        per = self.steps[prob]
        tests = sorted({t for t, _i, _e in per})
        impls = sorted({i for _t, i, _e in per})
        execs = {}
        for t, i, e in per:
            execs.setdefault((t, i), []).append(e)
        traces = {}
        for i in impls:
            tr = []
            for t in tests:
                if (t, i) not in execs:
                    tr.append(("absent", t))
                for e in sorted(execs.get((t, i), [])):
                    s = per[(t, i, e)]
                    tr.extend(("out", normalize_output(s[k], mode)) for k in sorted(s))
            traces[i] = tr
        return traces

    def brute_partition(self, prob, cfg):
        """Pairwise-equivalence partition: an implementation joins a group only if it matches every member."""
        traces = self.traces(prob, cfg.exception_mode)

        def eq(a, b):
            return len(a) == len(b) and all(
                x == y or (x[0] == y[0] == "out" and output_equivalent(x[1], y[1], cfg)) for x, y in zip(a, b)
            )

        groups = []
        for i in sorted(traces):
            for g in groups:
                if all(eq(traces[i], traces[m]) for m in g):
                    g.append(i)
                    break
            else:
                groups.append([i])
        return sorted((sorted(g) for g in groups), key=lambda g: (-len(g), g[0]))


class FileWorkload:
    """Line sources backed by the files ``Workload.write`` produces."""

    def __init__(self, paths):
        self.paths = paths

    def _lines(self, name):
        with open(self.paths[name], encoding="utf-8") as f:
            yield from f

    def implementation_lines(self):
        return self._lines("implementations")

    def test_lines(self):
        return self._lines("tests")

    def observation_lines(self):
        return self._lines("observations")
