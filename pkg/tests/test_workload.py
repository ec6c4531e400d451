import json

import pytest

from obslake.errors import InvalidDensity
from obslake.model import END_EXECUTION_KEY
from obslake.workload import WorkloadDensity, class_sizes, generate_workload, stream_digest

# frozen from the first generator run; any change here means streams changed
FROZEN_OBS_DIGEST_SEED0_P1 = "de9805581ed4eae9"
FROZEN_IMPL_DIGEST_SEED0_P1 = "07e1cc08533840b5"


def count_lines(lines):
    rows = markers = 0
    execs = set()
    for line in lines:
        rec = json.loads(line)
        if END_EXECUTION_KEY in rec:
            markers += 1
        else:
            rows += 1
            execs.add((rec["problem_id"], rec["implementation_id"], rec["test_id"], rec["execution_id"]))
    return rows, markers, len(execs)


def test_single_problem_density():
    w = generate_workload(1, seed=0)
    rows, markers, execs = count_lines(w.observation_lines())
    # 188.9 sequences x 88.99 steps per sequence ~= 16,810 rows
    assert rows == w.observation_rows
    assert abs(rows - 188.9 * 88.99) / (188.9 * 88.99) < 0.01
    assert execs == markers == w.sequences
    assert w.implementations == 26 and w.tests == 7
    assert sum(1 for _ in w.implementation_lines()) == 26


def test_frozen_digests():
    w = generate_workload(1, seed=0)
    assert stream_digest(w.observation_lines())[:16] == FROZEN_OBS_DIGEST_SEED0_P1
    assert stream_digest(w.implementation_lines())[:16] == FROZEN_IMPL_DIGEST_SEED0_P1


def test_determinism_and_seed_sensitivity():
    a, b, c = generate_workload(3, seed=5), generate_workload(3, seed=5), generate_workload(3, seed=6)
    for f in ("observation_lines", "implementation_lines", "test_lines"):
        assert stream_digest(getattr(a, f)()) == stream_digest(getattr(b, f)())
    assert stream_digest(a.observation_lines()) != stream_digest(c.observation_lines())
    # a prefix of problems is unaffected by how many follow
    first = generate_workload(1, seed=5)
    assert stream_digest(first.plans[0].observation_lines(first.plans[0].build())) == \
        stream_digest(a.plans[0].observation_lines(a.plans[0].build()))


def test_full_scale_plan_totals():
    w = generate_workload(509, seed=0)
    assert abs(w.observation_rows - 8_556_455) <= 0.01 * 8_556_455
    assert abs(w.implementations - 13_384) <= 0.01 * 13_384
    assert abs(w.sequences - 95_154) <= 0.01 * 95_154


def test_truth_is_consistent(small_workload):
    truth = small_workload.truth()
    assert set(truth) == {"p0000", "p0001"}
    for t in truth.values():
        assert sum(t.class_sizes) == len(t.implementations)
        assert [len(m) for m in t.class_members] == t.class_sizes
        assert sorted(x for m in t.class_members for x in m) == sorted(t.implementations)
        assert t.deviating_cells[0] == 0
        assert t.total_cells == sum(t.test_lengths)
        for j in range(1, len(t.class_sizes)):
            assert t.deviating_cells[j] == round(j * 0.1 * t.total_cells)
            assert t.planted_agreement(j) == pytest.approx(1 - j * 0.1, abs=1 / t.total_cells)


def test_write_produces_files(tmp_path):
    w = generate_workload(1, seed=3)
    paths = w.write(tmp_path / "out")
    lines = paths["observations"].read_text().splitlines()
    assert stream_digest(lines) == stream_digest(w.observation_lines())
    summary = json.loads(paths["truth"].read_text())
    assert summary["observation_rows"] == w.observation_rows
    assert summary["problems_truth"]["p0000"]["class_sizes"] == [20, 5, 1]


@pytest.mark.parametrize("n, expected", [(1, [1]), (2, [2]), (3, [2, 1]), (26, [20, 5, 1]), (40, [30, 8, 2])])
def test_class_sizes(n, expected):
    assert class_sizes(n, 3) == expected
    assert sum(expected) == n


@pytest.mark.parametrize("bad", [
    dict(implementations_per_problem=0),
    dict(steps_per_sequence=-1),
    dict(behavior_classes=0),
    dict(minority_deviation=1.5),
])
def test_invalid_density(bad):
    with pytest.raises(InvalidDensity):
        generate_workload(1, density=WorkloadDensity(**bad))


def test_invalid_problem_count():
    with pytest.raises(InvalidDensity):
        generate_workload(0)
