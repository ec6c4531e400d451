import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import QUEUE_KEY, build_lakehouse, impl_line, obs_line, test_line
from helpers import Reference
from obslake.catalog import PartitionKey
from obslake.errors import EmptyCommonTestSet, ReferentialGap, UnknownCommit, UnknownImplementation
from obslake.ingest import ingest_implementations, ingest_observations, ingest_tests
from obslake.model import (
    EquivalenceConfig,
    ExceptionMode,
    IdKind,
    content_id,
)
from obslake.schema import IMPLEMENTATIONS, OBSERVATIONS, TESTS
from obslake.srm import (
    BehaviorCluster,
    Verdict,
    ViewMode,
    behavioral_drift,
    cluster_implementations,
    consensus_oracle,
    fingerprint_implementations,
    majority_vote,
    nversion_assess,
    srm_full_view,
    srm_joined_view,
    srm_output_view,
)


@pytest.fixture(scope="module")
def reference(small_workload):
    return Reference(small_workload)


def keys(lh):
    return sorted(lh.read_at().partition_map(OBSERVATIONS))


# --------------------------------------------------------------------------
# views
# --------------------------------------------------------------------------


def test_queue_output_view(queue_lh):
    v = srm_output_view(queue_lh.read_at(), QUEUE_KEY)
    assert v.mode is ViewMode.OUTPUT
    assert len(v.rows) == len(v.columns) == 1
    cell = v.cell(v.rows[0], v.columns[0])
    assert [s.step_id for s in cell.steps] == list(range(6))
    assert [s.output for s in cell.steps] == ['"ok"', "0", "true", "true", "1", "1"]
    assert cell.steps[2].operation is None


def test_queue_full_and_joined_view(queue_lh):
    view = queue_lh.read_at()
    full = srm_full_view(view, QUEUE_KEY)
    s2 = full.cell(full.rows[0], full.columns[0]).steps[2]
    assert (s2.operation, s2.inputs, s2.output) == ("enqueue", ['{"value":1}'], "true")
    j = srm_joined_view(view, QUEUE_KEY)
    assert j.mode is ViewMode.JOINED
    impl = j.implementations[j.columns[0]]
    assert "class ArrayQueue" in impl.source_code and impl.alias == "impl_queue_A"
    assert j.tests[j.rows[0]].alias == "test_fifo_1"
    doc = json.loads(json.dumps(j.to_dict()))
    assert doc["implementations"][j.columns[0]]["source_code"] == impl.source_code


def test_unknown_problem_empty_view(queue_lh):
    v = srm_output_view(queue_lh.read_at(), PartitionKey("demo", "nope"))
    assert v.rows == [] and v.columns == [] and v.cells == {}
    assert cluster_implementations(queue_lh.read_at(), PartitionKey("demo", "nope")) == []


def test_output_view_matches_reference(small_lh, reference):
    view = small_lh.read_at()
    for key in keys(small_lh):
        v = srm_output_view(view, key)
        ref = reference.cells(key.problem_id)
        assert v.rows == sorted({t for t, _ in ref})
        assert v.columns == sorted({i for _, i in ref})
        for t in v.rows:
            for i in v.columns:
                c = v.cell(t, i)
                if (t, i) not in ref:
                    assert c is None
                else:
                    assert [s.output for s in c.steps] == ref[(t, i)]
                    assert [s.step_id for s in c.steps] == list(range(len(c.steps)))


def test_joined_view_matches_nested_loop_join(small_lh, reference):
    view = small_lh.read_at()
    key = keys(small_lh)[0]
    j = srm_joined_view(view, key)
    out = srm_output_view(view, key)
    # nested-loop join over raw rows
    obs = view.rows(OBSERVATIONS, key)
    impls = view.rows(IMPLEMENTATIONS, key)
    tests = view.rows(TESTS, key)
    joined = [(o, i, t) for o in obs for i in impls for t in tests
              if o["implementation_id"] == i["implementation_id"] and o["test_id"] == t["test_id"]]
    assert len(joined) == len(obs) == out.step_count == j.step_count
    for o, i, t in joined[:500]:
        assert j.implementations[o["implementation_id"]].source_code == i["source_code"]
        assert i["source_code"] == reference.source[(key.problem_id, i["implementation_id"])]
        assert j.tests[o["test_id"]].definition == reference.definition[(key.problem_id, t["test_id"])]


def test_joined_view_referential_gap(lh):
    ingest_implementations(lh, [impl_line("A", "class A {}")])
    ingest_tests(lh, [test_line("T", "t")])
    ingest_observations(lh, [obs_line("A", "T", "e", 0, 1)])
    # simulate an out-of-order loader: observations for a test that has no dimension row
    from obslake.catalog import begin_append, commit, stage_rows

    row = lh.read_at().rows(OBSERVATIONS)[0]
    txn = begin_append(lh, OBSERVATIONS)
    stage_rows(txn, [{**row, "test_id": "test_missing", "metrics": None}])
    commit(txn)
    srm_output_view(lh.read_at(), QUEUE_KEY)
    with pytest.raises(ReferentialGap):
        srm_joined_view(lh.read_at(), QUEUE_KEY)


def test_views_are_deterministic(small_lh):
    view = small_lh.read_at()
    key = keys(small_lh)[1]
    assert srm_output_view(view, key).to_dict() == srm_output_view(view, key).to_dict()
    assert [c.to_dict() for c in cluster_implementations(view, key)] == \
        [c.to_dict() for c in cluster_implementations(small_lh.read_at(), key)]
    assert consensus_oracle(view, key).to_dict() == consensus_oracle(view, key).to_dict()


def test_operations_open_only_target_partition(small_lh):
    view = small_lh.read_at()
    key = keys(small_lh)[0]
    subject = srm_output_view(view, key).columns[3]
    allowed = {s.path for t in (OBSERVATIONS, IMPLEMENTATIONS, TESTS) for s in view.segments(t, key)}
    ops = [
        lambda: srm_output_view(view, key),
        lambda: srm_full_view(view, key),
        lambda: srm_joined_view(view, key),
        lambda: fingerprint_implementations(view, key),
        lambda: cluster_implementations(view, key),
        lambda: cluster_implementations(view, key, EquivalenceConfig(float_tolerance=0.5)),
        lambda: consensus_oracle(view, key),
        lambda: nversion_assess(view, key, subject=subject),
    ]
    for op in ops:
        small_lh.io.reset()
        op()
        assert small_lh.io.opened_paths and set(small_lh.io.opened_paths) <= allowed


# --------------------------------------------------------------------------
# fingerprints and clustering
# --------------------------------------------------------------------------


def test_clusters_match_brute_force_and_truth(small_lh, reference, small_workload):
    view = small_lh.read_at()
    truth = small_workload.truth()
    for key in keys(small_lh):
        clusters = cluster_implementations(view, key)
        got = [c.members for c in clusters]
        assert got == reference.brute_partition(key.problem_id, EquivalenceConfig())
        t = truth[key.problem_id]
        assert [c.size for c in clusters] == t.class_sizes
        assert [sorted(m) for m in t.class_members] == got
        assert [c.class_id for c in clusters] == list(range(len(clusters)))
        prints = {f.implementation_id: f for f in fingerprint_implementations(view, key)}
        for c in clusters:
            assert len({prints[m].digest for m in c.members}) == 1
            assert c.representative == c.members[0]
        assert len({c.digest for c in clusters}) == len(clusters)


def test_exception_modes_change_grouping(small_lh, reference):
    view = small_lh.read_at()
    key = keys(small_lh)[0]
    for mode in ExceptionMode:
        cfg = EquivalenceConfig(mode)
        got = [c.members for c in cluster_implementations(view, key, cfg)]
        assert got == reference.brute_partition(key.problem_id, cfg)


def small_problem(lh, outputs: dict[str, list], tests=("T1",), prob="q1"):
    """outputs: alias -> list of outputs per test (each a list of step outputs, or None for absent)."""
    build_lakehouse(lh, {a: f"class {a} {{}}" for a in outputs}, {t: f"def {t}" for t in tests}, [], prob=prob)
    lines = []
    for a, per_test in outputs.items():
        for t, steps in zip(tests, per_test):
            if steps is None:
                continue
            lines += [obs_line(a, t, f"{a}-{t}", s, v, prob=prob) for s, v in enumerate(steps)]
    rep = ingest_observations(lh, lines)
    assert rep.rows_rejected == 0
    v = lh.read_at()
    key = PartitionKey("demo", prob)
    ids = {r["alias"]: r["implementation_id"] for r in v.rows(IMPLEMENTATIONS, key)}
    return v, key, ids


def test_identical_and_single_implementations(lh):
    v, key, ids = small_problem(lh, {"A": [[1, 2]], "B": [[1, 2]], "C": [[1, 2]]})
    (c,) = cluster_implementations(v, key)
    assert c.size == 3
    prints = fingerprint_implementations(v, key)
    assert len({p.digest for p in prints}) == 1 and prints[0].trace_length == 2


def test_single_implementation(lh):
    v, key, ids = small_problem(lh, {"A": [[1]]})
    assert [c.size for c in cluster_implementations(v, key)] == [1]


def test_one_output_difference_splits(lh):
    v, key, ids = small_problem(lh, {"A": [[1, 2]], "B": [[1, 3]]})
    prints = {p.implementation_id: p.digest for p in fingerprint_implementations(v, key)}
    assert prints[ids["A"]] != prints[ids["B"]]


def test_absent_cells_do_not_alias_null(lh):
    v, key, ids = small_problem(
        lh, {"A": [[1], None], "B": [[1], [None]], "C": [[1], None]}, tests=("T1", "T2")
    )
    view = srm_output_view(v, key)
    t2 = content_id(IdKind.TEST, "def T2")
    assert view.cell(t2, ids["A"]) is None
    assert [s.output for s in view.cell(t2, ids["B"]).steps] == ["null"]
    groups = [sorted(c.members) for c in cluster_implementations(v, key)]
    assert groups == [sorted([ids["A"], ids["C"]]), [ids["B"]]]
    lens = {p.implementation_id: p.trace_length for p in fingerprint_implementations(v, key)}
    assert lens[ids["A"]] == 1 and lens[ids["B"]] == 2


def test_tolerance_uses_representative_chaining(lh):
    v, key, ids = small_problem(lh, {"A": [[1.0]], "B": [[1.0008]], "C": [[1.0016]], "D": [[5]]})
    exact = cluster_implementations(v, key)
    assert [c.size for c in exact] == [1, 1, 1, 1]
    tol = cluster_implementations(v, key, EquivalenceConfig(float_tolerance=0.001))
    order = sorted(ids.values())
    # visiting in id order, each implementation joins the first representative within tolerance
    reps = []
    for i in order:
        val = {ids["A"]: 1.0, ids["B"]: 1.0008, ids["C"]: 1.0016, ids["D"]: 5.0}[i]
        for r in reps:
            if abs(r[0] - val) <= 0.001:
                r[1].append(i)
                break
        else:
            reps.append((val, [i]))
    expected = sorted((sorted(m) for _, m in reps), key=lambda g: (-len(g), g[0]))
    assert [c.members for c in tol] == expected
    assert sum(c.size for c in tol) == 4
    for c in tol:
        assert isinstance(c, BehaviorCluster)


# --------------------------------------------------------------------------
# consensus
# --------------------------------------------------------------------------


@pytest.mark.parametrize(
    "outs, majority, support, total, tied",
    [
        (list("AAABB"), "A", 3, 5, False),
        (list("AB"), "A", 1, 2, True),
        (list("BA"), "A", 1, 2, True),
        (list("CCC"), "C", 3, 3, False),
        (list("BBAAC"), "A", 2, 5, True),
    ],
)
def test_majority_vote_examples(outs, majority, support, total, tied):
    c = majority_vote(outs)
    assert (c.majority_output, c.support, c.total, c.tied) == (majority, support, total, tied)


@given(st.lists(st.sampled_from(["1", "2", "3", '"x"', "null"]), min_size=1, max_size=12))
def test_majority_property_and_monotone_stability(outs):
    c = majority_vote(outs)
    counts = Counter(outs)
    assert c.support == max(counts.values()) and c.total == len(outs)
    assert all(n <= c.support for n in counts.values())
    assert c.tied == (sum(1 for n in counts.values() if n == c.support) > 1)
    # adding a vote for the current majority never changes it
    again = majority_vote(outs + [c.majority_output])
    assert again.majority_output == c.majority_output and not again.tied


def test_consensus_one_vote_per_implementation(lh):
    build_lakehouse(lh, {a: f"class {a} {{}}" for a in "ABC"}, {"T": "t"}, [])
    lines = [obs_line("A", "T", "a0", 0, 1), obs_line("B", "T", "b0", 0, 1)]
    # C runs five times with a different output; the last execution id wins
    lines += [obs_line("C", "T", f"c{i}", 0, 2 if i < 4 else 1) for i in range(5)]
    ingest_observations(lh, lines)
    o = consensus_oracle(lh.read_at(), QUEUE_KEY)
    (cell,) = o.cells.values()
    assert (cell.majority_output, cell.support, cell.total) == ("1", 3, 3)
    # a later commit supersedes earlier executions regardless of execution id
    ingest_observations(lh, [obs_line("C", "T", "a-rerun", 0, 2)])
    (cell,) = consensus_oracle(lh.read_at(), QUEUE_KEY).cells.values()
    assert (cell.majority_output, cell.support, cell.total) == ("1", 2, 3)


def test_consensus_on_generated_problem(small_lh, reference, small_workload):
    view = small_lh.read_at()
    key = keys(small_lh)[0]
    o = consensus_oracle(view, key)
    cells = reference.cells(key.problem_id)
    votes = {}
    for (t, _i), outs in cells.items():
        for s, out in enumerate(outs):
            votes.setdefault((t, s), []).append(out)
    assert set(o.cells) == set(votes)
    for k, vs in votes.items():
        cnt = Counter(vs)
        top = max(cnt.values())
        assert o.cells[k].support == top
        assert o.cells[k].majority_output == min(x for x, n in cnt.items() if n == top)
    t = small_workload.truth()[key.problem_id]
    assert o.implementations == len(t.implementations)


# --------------------------------------------------------------------------
# n-version assessment
# --------------------------------------------------------------------------


def test_assessment_against_planted_classes(small_lh, small_workload):
    view = small_lh.read_at()
    for key in keys(small_lh):
        t = small_workload.truth()[key.problem_id]
        for j, members in enumerate(t.class_members):
            r = nversion_assess(view, key, subject=members[0])
            assert r.count(Verdict.MISSING) == 0
            assert r.agreement_ratio == pytest.approx(t.planted_agreement(j))
    with pytest.raises(UnknownImplementation):
        nversion_assess(view, keys(small_lh)[0], subject="impl_0000")


def test_assessment_missing_cells_excluded(lh):
    v, key, ids = small_problem(
        lh, {"A": [[1, 2], [3]], "B": [[1, 2], [3]], "C": [[1, 9], None]}, tests=("T1", "T2")
    )
    r = nversion_assess(v, key, subject=ids["C"])
    assert (r.count(Verdict.AGREE), r.count(Verdict.DEVIATE), r.count(Verdict.MISSING)) == (1, 1, 1)
    assert r.agreement_ratio == 0.5
    assert nversion_assess(v, key, subject="A").agreement_ratio == 1.0  # alias accepted
    json.dumps(r.to_dict())


# --------------------------------------------------------------------------
# drift
# --------------------------------------------------------------------------


def lineage_lakehouse(lh, versions: dict[str, dict[str, list]]):
    """versions: commit -> {test alias: outputs}; one implementation per commit."""
    tests = sorted({t for per in versions.values() for t in per})
    ingest_tests(lh, [test_line(t, f"def {t}") for t in tests])
    ingest_implementations(lh, [impl_line(f"v_{c}", f"class V {{ /* {c} */ }}", git_commit_hash=c) for c in versions])
    lines = []
    for c, per in versions.items():
        for t, outs in per.items():
            lines += [obs_line(f"v_{c}", t, f"{c}-{t}", s, o, git_commit_hash=c) for s, o in enumerate(outs)]
    assert ingest_observations(lh, lines).rows_rejected == 0
    return lh.read_at()


def test_drift_identical_behavior(lh):
    v = lineage_lakehouse(lh, {c: {"T1": [1, 2], "T2": [3]} for c in ("c1", "c2", "c3")})
    r = behavioral_drift(v, QUEUE_KEY, lineage=["c1", "c2", "c3"])
    assert r.drift_pairs == []
    assert len({c.digest for c in r.commits}) == 1


def test_drift_flags_changed_commit(lh):
    v = lineage_lakehouse(lh, {
        "c1": {"T1": [1, 2], "T2": [3]},
        "c2": {"T1": [1, 5], "T2": [3]},
        "c3": {"T1": [1, 5], "T2": [3], "T3": [7]},  # new test does not count as drift
    })
    r = behavioral_drift(v, QUEUE_KEY, lineage=["c1", "c2", "c3"])
    assert r.drift_pairs == [("c1", "c2")]
    assert len(r.common_tests) == 2
    assert behavioral_drift(v, QUEUE_KEY, lineage=["c2"]).drift_pairs == []
    with pytest.raises(UnknownCommit):
        behavioral_drift(v, QUEUE_KEY, lineage=["c1", "zzz"])


def test_drift_needs_common_tests(lh):
    v = lineage_lakehouse(lh, {"c1": {"T1": [1]}, "c2": {"T2": [1]}})
    with pytest.raises(EmptyCommonTestSet):
        behavioral_drift(v, QUEUE_KEY, lineage=["c1", "c2"])


def test_drift_resolves_commit_through_implementation(lh):
    ingest_tests(lh, [test_line("T", "t")])
    ingest_implementations(lh, [impl_line("a", "class A {}", git_commit_hash="c1"),
                                impl_line("b", "class B {}", git_commit_hash="c2")])
    ingest_observations(lh, [obs_line("a", "T", "e", 0, 1), obs_line("b", "T", "e", 0, 2)])
    r = behavioral_drift(lh.read_at(), QUEUE_KEY, lineage=["c1", "c2"])
    assert r.drift_pairs == [("c1", "c2")]
