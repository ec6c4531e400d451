"""Deterministic synthetic workloads at benchmark density.

Each problem gets roughly 26 implementations, each executed against every
test of the problem (so the SRM is dense), with test lengths chosen so the
cumulative number of step rows tracks the target density. Implementations
are split into planted behavior classes: the largest class always produces
the reference output, each minority class deviates on a fixed fraction of
the (test, step) cells. The ground truth is returned alongside the streams.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .errors import InvalidDensity
from .model import END_EXECUTION_KEY, IdKind, canonical_text, content_id, exception_value

_OPS = ("offer", "poll", "peek", "size", "isEmpty", "contains", "clear", "toArray", "remove", "addAll")
_WORDS = ("alpha", "beta", "gamma", "delta", "omega", "red", "green", "blue", "x", "y", "")


@dataclass(frozen=True)
class WorkloadDensity:
    # per-problem densities derived from the benchmark totals: 13,384
    # implementations, 95,154 call sequences, 8,556,455 step rows, 509 problems
    implementations_per_problem: float = 13384 / 509
    sequences_per_problem: float = 95154 / 509
    steps_per_sequence: float = 8556455 / 95154
    behavior_classes: int = 3
    # fraction of (test, step) cells on which minority class j deviates: j * minority_deviation
    minority_deviation: float = 0.1
    data_set_id: str = "synthetic"
    language: str = "java"
    environment: str = "jdk17-linux-x64"

    def validate(self) -> None:
        if not (self.implementations_per_problem >= 1):
            raise InvalidDensity("implementations_per_problem must be >= 1")
        if not (self.sequences_per_problem >= self.implementations_per_problem):
            raise InvalidDensity("need at least one test per implementation")
        if not (self.steps_per_sequence >= 2):
            raise InvalidDensity("steps_per_sequence must be >= 2")
        if self.behavior_classes < 1:
            raise InvalidDensity("behavior_classes must be >= 1")
        if not (0 < self.minority_deviation and self.minority_deviation * max(1, self.behavior_classes - 1) < 1):
            raise InvalidDensity("minority_deviation out of range")
        if not self.data_set_id:
            raise InvalidDensity("data_set_id must be non-empty")


@dataclass
class ProblemTruth:
    problem_id: str
    implementations: list[str]            # content ids, generation order
    aliases: list[str]
    tests: list[str]                      # content ids
    test_lengths: list[int]
    class_sizes: list[int]                # class 0 is the reference class
    class_members: list[list[str]]        # content ids per class
    deviating_cells: list[int]            # per class, number of (test, step) cells that deviate
    total_cells: int
    rows: int
    sequences: int

    def planted_agreement(self, class_index: int) -> float:
        return 1.0 - self.deviating_cells[class_index] / self.total_cells

    def class_of(self, impl_id: str) -> int:
        for j, members in enumerate(self.class_members):
            if impl_id in members:
                return j
        raise KeyError(impl_id)


def class_sizes(n: int, classes: int) -> list[int]:
    """Planted class sizes; 26 implementations and 3 classes give [20, 5, 1]."""
    k = max(1, min(classes, n))
    minority = [max(1, round(n / 5 ** j)) for j in range(1, k)]
    while minority and n - sum(minority) <= max(minority):
        minority.pop()
    return [n - sum(minority)] + minority


class _ProblemPlan:
    """Everything needed to emit one problem's three streams."""

    def __init__(self, index: int, seed: int, density: WorkloadDensity, cum: list):
        d = density
        self.index = index
        self.problem_id = f"p{index:04d}"
        rng = random.Random(f"{seed}:{index}")
        self.rng_seed = rng.getrandbits(64)
        n_impl = math.floor((index + 1) * d.implementations_per_problem) - math.floor(index * d.implementations_per_problem)
        n_impl = max(1, n_impl)
        # cum = [sequences so far, rows so far]
        seq_target = (index + 1) * d.sequences_per_problem
        n_tests = max(1, round((seq_target - cum[0]) / n_impl))
        row_target = (index + 1) * d.sequences_per_problem * d.steps_per_sequence
        mean = d.steps_per_sequence
        lo, hi = max(2, int(mean * 0.5)), max(3, int(mean * 1.5))
        lengths = [rng.randint(lo, hi) for _ in range(n_tests)]
        residual = (row_target - cum[1]) / n_impl - sum(lengths[:-1])
        lengths[-1] = int(min(max(2, round(residual)), 3 * hi))
        self.n_impl = n_impl
        self.lengths = lengths
        self.rows = sum(lengths) * n_impl
        self.sequences = n_tests * n_impl
        cum[0] += self.sequences
        cum[1] += self.rows
        self.density = d

    def build(self):
        """Materialize the problem: dimension records, cell fragments, truth."""
        d = self.density
        rng = random.Random(self.rng_seed)
        pid = self.problem_id
        ops = rng.sample(_OPS, k=6)

        impl_recs = []
        for i in range(self.n_impl):
            body = " ".join(rng.choice(_WORDS + tuple(ops)) for _ in range(rng.randint(20, 60)))
            src = (
                f"public class Queue_{pid}_{i:02d} {{\n"
                f"  // variant {i} seed {rng.getrandbits(32):08x}\n"
                f"  private final java.util.ArrayDeque<Object> items = new java.util.ArrayDeque<>();\n"
                f"  /* {body} */\n}}\n"
            )
            alias = f"{pid}_impl_{i:02d}"
            impl_recs.append({
                "data_set_id": d.data_set_id,
                "problem_id": pid,
                "id": alias,
                "source_code": src,
                "language": d.language,
                "static_metrics": {"loc": float(src.count("\n")), "chars": float(len(src))},
            })

        test_recs = []
        cells = []  # per test: list of (step fragment, reference output text)
        for t, length in enumerate(self.lengths):
            steps = []
            sheet = []
            for s in range(length):
                if s == 0:
                    op, inputs, out = "create", [], None
                else:
                    op = rng.choice(ops)
                    inputs = [self._value(rng) for _ in range(rng.randint(0, 2))]
                    out = self._value(rng)
                in_text = canonical_text(inputs)
                out_text = canonical_text(out)
                frag = f'"step_id":{s},"operation":"{op}","inputs":{in_text}'
                steps.append((frag, out_text))
                sheet.append([op, inputs, out])
            kind = "sequence_sheet" if t % 4 != 3 else "mined_unit_test"
            definition = json.dumps({"problem": pid, "test": t, "sheet": sheet}, separators=(",", ":"))
            test_recs.append({
                "data_set_id": d.data_set_id,
                "problem_id": pid,
                "id": f"{pid}_test_{t:02d}",
                "definition": definition,
                "definition_kind": kind,
                "language": d.language,
            })
            cells.append(steps)

        sizes = class_sizes(self.n_impl, d.behavior_classes)
        order = list(range(self.n_impl))
        rng.shuffle(order)
        impl_class = [0] * self.n_impl
        pos = 0
        members_idx = []
        for j, size in enumerate(sizes):
            members_idx.append(sorted(order[pos:pos + size]))
            for i in order[pos:pos + size]:
                impl_class[i] = j
            pos += size

        flat = [(t, s) for t, length in enumerate(self.lengths) for s in range(1, length)]
        total_cells = sum(self.lengths)
        deviant: list[dict] = [{}]
        dev_counts = [0]
        for j in range(1, len(sizes)):
            k = max(1, min(len(flat), round(j * d.minority_deviation * total_cells)))
            chosen = rng.sample(flat, k)
            table = {}
            for (t, s) in chosen:
                ref = cells[t][s][1]
                table[(t, s)] = self._deviate(ref, j)
            deviant.append(table)
            dev_counts.append(k)

        impl_ids = [content_id(IdKind.IMPLEMENTATION, r["source_code"]) for r in impl_recs]
        test_ids = [content_id(IdKind.TEST, r["definition"]) for r in test_recs]
        truth = ProblemTruth(
            problem_id=pid,
            implementations=impl_ids,
            aliases=[r["id"] for r in impl_recs],
            tests=test_ids,
            test_lengths=list(self.lengths),
            class_sizes=sizes,
            class_members=[sorted(impl_ids[i] for i in m) for m in members_idx],
            deviating_cells=dev_counts,
            total_cells=total_cells,
            rows=self.rows,
            sequences=self.sequences,
        )
        exec_metrics = [
            [
                '{"branch_coverage":%s,"duration_ms":%s}' % (
                    canonical_text(round(rng.uniform(0.4, 1.0), 4)),
                    canonical_text(round(rng.uniform(0.1, 50.0), 3)),
                )
                for _ in self.lengths
            ]
            for _ in range(self.n_impl)
        ]
        return impl_recs, test_recs, cells, impl_class, deviant, exec_metrics, truth

    @staticmethod
    def _value(rng: random.Random):
        r = rng.random()
        if r < 0.45:
            return rng.randint(-20, 100)
        if r < 0.65:
            return rng.random() < 0.5
        if r < 0.85:
            return rng.choice(_WORDS)
        if r < 0.92:
            return [rng.randint(0, 9) for _ in range(rng.randint(0, 3))]
        if r < 0.97:
            return round(rng.uniform(-10, 10), 2)
        return None

    @staticmethod
    def _deviate(ref: str, j: int) -> str:
        if j % 2 == 0:
            return exception_value("java.lang.IllegalStateException", f"deviant-{j}")
        return canonical_text({"wrong": ref, "class": j})

    def observation_lines(self, built) -> Iterator[str]:
        impl_recs, test_recs, cells, impl_class, deviant, exec_metrics, _ = built
        d = self.density
        pid = self.problem_id
        head = f'{{"data_set_id":{json.dumps(d.data_set_id)},"problem_id":"{pid}",'
        tail_ctx = f',"language":{json.dumps(d.language)},"environment":{json.dumps(d.environment)},"metrics":'
        for i, rec in enumerate(impl_recs):
            dev = deviant[impl_class[i]]
            for t, steps in enumerate(cells):
                exe = f"{pid}-i{i:02d}-t{t:02d}-r0"
                prefix = (
                    f'{head}"implementation_id":"{rec["id"]}","test_id":"{test_recs[t]["id"]}",'
                    f'"execution_id":"{exe}",'
                )
                suffix = tail_ctx + exec_metrics[i][t] + "}"
                if dev:
                    for s, (frag, out) in enumerate(steps):
                        out = dev.get((t, s), out)
                        yield prefix + frag + ',"output":' + out + suffix
                else:
                    for frag, out in steps:
                        yield prefix + frag + ',"output":' + out + suffix
                yield f'{{"{END_EXECUTION_KEY}":"{exe}"}}'


@dataclass
class Workload:
    problems: int
    seed: int
    density: WorkloadDensity
    plans: list = field(repr=False, default_factory=list)

    @property
    def observation_rows(self) -> int:
        return sum(p.rows for p in self.plans)

    @property
    def sequences(self) -> int:
        return sum(p.sequences for p in self.plans)

    @property
    def implementations(self) -> int:
        return sum(p.n_impl for p in self.plans)

    @property
    def tests(self) -> int:
        return sum(len(p.lengths) for p in self.plans)

    def _built(self) -> Iterator[tuple]:
        for plan in self.plans:
            yield plan, plan.build()

    def implementation_lines(self) -> Iterator[str]:
        for _, built in self._built():
            for rec in built[0]:
                yield json.dumps(rec, separators=(",", ":"))

    def test_lines(self) -> Iterator[str]:
        for _, built in self._built():
            for rec in built[1]:
                yield json.dumps(rec, separators=(",", ":"))

    def observation_lines(self) -> Iterator[str]:
        for plan, built in self._built():
            yield from plan.observation_lines(built)

    def truth(self) -> dict[str, ProblemTruth]:
        return {plan.problem_id: built[-1] for plan, built in self._built()}

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """Write the three streams plus ``truth.json``; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "implementations": out / "implementations.jsonl",
            "tests": out / "tests.jsonl",
            "observations": out / "observations.jsonl",
            "truth": out / "truth.json",
        }
        with open(paths["implementations"], "w") as fi, open(paths["tests"], "w") as ft, \
                open(paths["observations"], "w") as fo:
            truth = {}
            for plan, built in self._built():
                for rec in built[0]:
                    fi.write(json.dumps(rec, separators=(",", ":")) + "\n")
                for rec in built[1]:
                    ft.write(json.dumps(rec, separators=(",", ":")) + "\n")
                buf = []
                for line in plan.observation_lines(built):
                    buf.append(line)
                    if len(buf) >= 8192:
                        fo.write("\n".join(buf) + "\n")
                        buf.clear()
                if buf:
                    fo.write("\n".join(buf) + "\n")
                truth[plan.problem_id] = asdict(built[-1])
        summary = {
            "problems": self.problems,
            "seed": self.seed,
            "density": asdict(self.density),
            "observation_rows": self.observation_rows,
            "sequences": self.sequences,
            "implementations": self.implementations,
            "tests": self.tests,
            "problems_truth": truth,
        }
        paths["truth"].write_text(json.dumps(summary, indent=1))
        return paths


def generate_workload(problems: int, seed: int = 0, density: Optional[WorkloadDensity] = None) -> Workload:
    """Plan a deterministic workload; streams are produced lazily from the plan."""
    density = density or WorkloadDensity()
    if problems < 1:
        raise InvalidDensity("problems must be >= 1")
    density.validate()
    cum = [0, 0]
    plans = [_ProblemPlan(i, seed, density, cum) for i in range(problems)]
    return Workload(problems, seed, density, plans)


def stream_digest(lines: Iterator[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode())
        h.update(b"\n")
    return h.hexdigest()
