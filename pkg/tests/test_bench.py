import json
from pathlib import Path

import jsonschema
import pytest

from obslake.bench import QUERIES, TARGETS_MS, run_benchmark
from obslake.cli import run
from obslake.schema import OBSERVATIONS

SCHEMA = json.loads((Path(__file__).parent.parent / "docs" / "schemas" / "bench_report.json").read_text())


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    return run_benchmark(2, seed=3, repetitions=2, root=tmp_path_factory.mktemp("bench"), concurrent_writers=2)


def test_report_contents(tiny):
    assert tiny.observation_rows == tiny.ingest[OBSERVATIONS].rows_written
    assert set(tiny.queries) == set(QUERIES) == set(TARGETS_MS)
    for q in tiny.queries.values():
        assert set(q.per_problem_ms) == {"p0000", "p0001"}
        assert 0 < q.mean_ms <= q.max_ms
    assert tiny.pruning_checked == 2 * 3 * 2 and tiny.pruning_ok
    assert tiny.clusters_match_truth
    assert tiny.cluster_sizes == tiny.planted_sizes
    assert 0 < tiny.bytes_per_row <= 32
    jsonschema.validate(tiny.to_dict(), SCHEMA)
    assert "pruning: 12 queries checked, 0 violations" in tiny.render()


def test_concurrent_mode_conserves_rows(tiny):
    c = tiny.concurrent
    assert c["writers"] == 2
    assert c["rows_written"] == c["rows_in_table"] == tiny.observation_rows
    assert c["snapshots"] == c["commits"] >= 2


def test_reproducible_results(tiny, tmp_path):
    again = run_benchmark(2, seed=3, repetitions=1, root=tmp_path)
    assert again.result_digest == tiny.result_digest
    assert again.observation_rows == tiny.observation_rows
    assert again.table_bytes[OBSERVATIONS] == tiny.table_bytes[OBSERVATIONS]
    other = run_benchmark(1, seed=4, repetitions=1)
    assert other.result_digest != tiny.result_digest


def test_temporary_root_is_removed(monkeypatch, tmp_path):
    monkeypatch.setenv("TMPDIR", str(tmp_path))
    import tempfile

    monkeypatch.setattr(tempfile, "tempdir", None)
    run_benchmark(1, seed=0, repetitions=1)
    assert not any(p.name.startswith("obslake-bench-") for p in tmp_path.iterdir())


def test_cli_bench_writes_report(tmp_path, capsys):
    report = tmp_path / "r.json"
    assert run(["bench", "--problems", "1", "--repetitions", "1", "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    jsonschema.validate(doc, SCHEMA)
    assert doc["pruning"]["ok"] and doc["clusters_match_truth"]
    assert "q1_output_view" in capsys.readouterr().out
    assert run(["bench", "--problems", "0"]) == 2


def test_invalid_problem_count():
    with pytest.raises(ValueError):
        run_benchmark(0)
