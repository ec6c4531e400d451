from __future__ import annotations

import json
from pathlib import Path

import pytest

from obslake.catalog import PartitionKey, open_lakehouse
from obslake.ingest import ingest_implementations, ingest_observations, ingest_tests
from obslake.workload import generate_workload

DATA = Path(__file__).parent / "data"
QUEUE_KEY = PartitionKey("demo", "q1")


def obs_line(impl, test, exe, step, output, *, ds="demo", prob="q1", op="call", inputs=(), **extra):
    rec = {
        "data_set_id": ds, "problem_id": prob, "implementation_id": impl, "test_id": test,
        "execution_id": exe, "step_id": step, "operation": op, "inputs": list(inputs),
        "output": output, "language": "java", "environment": "jdk17",
    }
    rec.update(extra)
    return json.dumps(rec)


def impl_line(alias, source, *, ds="demo", prob="q1", **extra):
    return json.dumps({"data_set_id": ds, "problem_id": prob, "id": alias, "source_code": source,
                       "language": "java", **extra})


def test_line(alias, definition, *, ds="demo", prob="q1", kind="sequence_sheet"):
    return json.dumps({"data_set_id": ds, "problem_id": prob, "id": alias, "definition": definition,
                       "definition_kind": kind, "language": "java"})


test_line.__test__ = False


@pytest.fixture
def lh(tmp_path):
    return open_lakehouse(tmp_path / "lh", create_if_missing=True, durable=False)


@pytest.fixture
def queue_lh(lh):
    ingest_implementations(lh, DATA / "queue_impls.jsonl")
    ingest_tests(lh, DATA / "queue_tests.jsonl")
    ingest_observations(lh, DATA / "queue_obs.jsonl")
    return lh


@pytest.fixture(scope="session")
def small_workload():
    return generate_workload(2, seed=7)


@pytest.fixture(scope="session")
def small_lh(tmp_path_factory, small_workload):
    """Two generated problems, ingested once for the whole session (treat as read-only)."""
    root = tmp_path_factory.mktemp("small") / "lh"
    lh = open_lakehouse(root, create_if_missing=True, durable=False)
    ingest_implementations(lh, small_workload.implementation_lines())
    ingest_tests(lh, small_workload.test_lines())
    ingest_observations(lh, small_workload.observation_lines())
    return lh


def build_lakehouse(lh, impls: dict[str, str], tests: dict[str, str], obs: list[str], **kw):
    """Ingest alias->source / alias->definition maps and observation lines."""
    prob = kw.get("prob", "q1")
    ds = kw.get("ds", "demo")
    ingest_implementations(lh, [impl_line(a, s, ds=ds, prob=prob) for a, s in impls.items()])
    ingest_tests(lh, [test_line(a, d, ds=ds, prob=prob) for a, d in tests.items()])
    return ingest_observations(lh, obs)


# acceptance criteria register (number -> (passed, title, detail)); printed after the run
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] AC{n:<2} {title}: {detail}")
