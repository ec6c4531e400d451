"""``obslake`` command-line front end."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Any, Optional, Sequence, TextIO

from .catalog import Lakehouse, PartitionKey, list_partitions, open_lakehouse
from .errors import ObsLakeError
from .ingest import ingest_implementations, ingest_observations, ingest_tests
from .model import EquivalenceConfig, ExceptionMode
from .schema import FieldType, TABLES
from . import srm

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, at: bool = False) -> None:
    p.add_argument("--root", default=None, help="lakehouse directory (default: $OBSLAKE_ROOT)")
    p.add_argument("--format", choices=("json", "table"), default="table", dest="output_format")
    if at:
        p.add_argument("--at", type=int, default=None, metavar="SNAPSHOT", help="read as of this snapshot")


def _partition_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("data_set_id")
    p.add_argument("problem_id")


def _equivalence_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--exception-mode", choices=[m.value for m in ExceptionMode], default=ExceptionMode.EXACT.value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="obslake", description="Embedded observation lakehouse")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("init", help="create a lakehouse")
    _common(p)
    for name, what in (("ingest-impls", "implementations"), ("ingest-tests", "tests"),
                       ("ingest-obs", "observations")):
        p = sub.add_parser(name, help=f"ingest a JSONL stream of {what} ('-' for stdin)")
        _common(p)
        p.add_argument("source")
        if name == "ingest-obs":
            p.add_argument("--batch-rows", type=int, default=65536)
    p = sub.add_parser("partitions", help="list partitions with row counts and sizes")
    _common(p, at=True)
    p.add_argument("--table", choices=TABLES, default=None)

    p = sub.add_parser("srm", help="stimulus-response matrix of one problem")
    _common(p, at=True)
    _partition_args(p)
    p.add_argument("--mode", choices=("output", "full", "joined"), default="output")
    p = sub.add_parser("cluster", help="behavioral equivalence classes")
    _common(p, at=True)
    _partition_args(p)
    _equivalence_args(p)
    p = sub.add_parser("oracle", help="per-cell consensus oracle")
    _common(p, at=True)
    _partition_args(p)
    _equivalence_args(p)
    p = sub.add_parser("assess", help="compare one implementation with the consensus of the others")
    _common(p, at=True)
    _partition_args(p)
    p.add_argument("implementation_id")
    _equivalence_args(p)
    p = sub.add_parser("drift", help="behavioral drift along a commit lineage")
    _common(p, at=True)
    _partition_args(p)
    p.add_argument("--commits", required=True, help="comma-separated git commit hashes, oldest first")
    _equivalence_args(p)

    p = sub.add_parser("snapshots", help="list snapshots")
    _common(p)
    p = sub.add_parser("add-column", help="add a nullable column to a table")
    _common(p)
    p.add_argument("table", choices=TABLES)
    p.add_argument("name")
    p.add_argument("type", choices=[t.value for t in FieldType])

    p = sub.add_parser("generate", help="write a synthetic workload")
    p.add_argument("--problems", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "table"), default="table", dest="output_format")
    p = sub.add_parser("bench", help="run the desk-scale benchmark")
    p.add_argument("--problems", type=int, default=50)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--writers", type=int, default=0, help="also run a concurrent ingest with this many writers")
    p.add_argument("--root", default=None, help="keep workload and lakehouse here instead of a temp dir")
    p.add_argument("--report", default=None, help="also write the JSON report to this file")
    p.add_argument("--format", choices=("json", "table"), default="table", dest="output_format")
    return parser


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _emit(out: TextIO, args, doc: Any, table: Optional[list[str]] = None) -> None:
    if args.output_format == "json" or table is None:
        out.write(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    else:
        out.write("\n".join(table) + "\n")


def _grid(header: Sequence[str], rows: list[Sequence[Any]]) -> list[str]:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*cells[0]), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in cells[1:]]
    return lines


def _short(text: Optional[str], n: int = 40) -> str:
    if text is None:
        return "-"
    return text if len(text) <= n else text[: n - 3] + "..."


def _handle(args, create: bool = False) -> Lakehouse:
    root = args.root or os.environ.get("OBSLAKE_ROOT")
    if not root:
        raise UsageError("no lakehouse root: pass --root or set OBSLAKE_ROOT")
    return open_lakehouse(root, create_if_missing=create)


def _cfg(args) -> EquivalenceConfig:
    try:
        return EquivalenceConfig(ExceptionMode(args.exception_mode), args.tolerance)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _key(args) -> PartitionKey:
    return PartitionKey(args.data_set_id, args.problem_id)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _cmd_init(args, out):
    lh = _handle(args, create=True)
    _emit(out, args, {"root": str(lh.root), "snapshot_id": lh.latest_snapshot_id() or None},
          [f"lakehouse ready at {lh.root}"])


def _cmd_ingest(args, out):
    lh = _handle(args)
    src = sys.stdin if args.source == "-" else args.source
    if args.command == "ingest-impls":
        rep = ingest_implementations(lh, src)
    elif args.command == "ingest-tests":
        rep = ingest_tests(lh, src)
    else:
        rep = ingest_observations(lh, src, batch_rows=args.batch_rows)
    d = rep.to_dict()
    lines = [
        f"table {rep.table}: read {rep.rows_read}, written {rep.rows_written},"
        f" deduplicated {rep.rows_deduplicated}, rejected {rep.rows_rejected}",
        f"elapsed {rep.elapsed:.3f}s, throughput {rep.throughput:,.0f} rows/s, snapshots {rep.snapshots}",
    ]
    lines += [f"  rejected {n} x {r}" for r, n in sorted(rep.reject_reasons.items())]
    _emit(out, args, d, lines)


def _cmd_partitions(args, out):
    view = _handle(args).read_at(args.at)
    docs, rows = [], []
    for t in [args.table] if args.table else TABLES:
        for p in list_partitions(view, t):
            docs.append({"table": t, **p.to_dict()})
            rows.append((t, p.key.data_set_id, p.key.problem_id, p.row_count, p.byte_size, p.segment_count))
    _emit(out, args, {"snapshot_id": view.snapshot_id, "partitions": docs},
          _grid(("table", "data_set_id", "problem_id", "rows", "bytes", "segments"), rows))


def _cmd_srm(args, out):
    view = _handle(args).read_at(args.at)
    fn = {"output": srm.srm_output_view, "full": srm.srm_full_view, "joined": srm.srm_joined_view}[args.mode]
    v = fn(view, _key(args))
    header = ["test_id"] + v.columns
    rows = []
    for t in v.rows:
        row = [t]
        for i in v.columns:
            c = v.cells[(t, i)]
            row.append("absent" if c is None else f"{len(c.steps)} steps")
        rows.append(row)
    _emit(out, args, v.to_dict(), _grid(header, rows) if v.rows else ["(empty partition)"])


def _cmd_cluster(args, out):
    view = _handle(args).read_at(args.at)
    clusters = srm.cluster_implementations(view, _key(args), _cfg(args))
    doc = {"partition": _key(args).to_dict(), "snapshot_id": view.snapshot_id,
           "equivalence": _cfg(args).to_dict(), "clusters": [c.to_dict() for c in clusters]}
    _emit(out, args, doc, _grid(("class_id", "size", "representative"),
                                [(c.class_id, c.size, c.representative) for c in clusters]))


def _cmd_oracle(args, out):
    view = _handle(args).read_at(args.at)
    o = srm.consensus_oracle(view, _key(args), _cfg(args))
    rows = [(t, s, _short(c.majority_output), c.support, c.total, "yes" if c.tied else "")
            for (t, s), c in sorted(o.cells.items())]
    _emit(out, args, o.to_dict(), _grid(("test_id", "step", "majority", "support", "total", "tied"), rows))


def _cmd_assess(args, out):
    view = _handle(args).read_at(args.at)
    r = srm.nversion_assess(view, _key(args), _cfg(args), args.implementation_id)
    ratio = "n/a" if r.agreement_ratio is None else f"{r.agreement_ratio:.4f}"
    _emit(out, args, r.to_dict(), [
        f"subject {r.subject}: agree {r.count(srm.Verdict.AGREE)}, deviate {r.count(srm.Verdict.DEVIATE)},"
        f" missing {r.count(srm.Verdict.MISSING)}, agreement ratio {ratio}",
    ])


def _cmd_drift(args, out):
    view = _handle(args).read_at(args.at)
    lineage = [c for c in args.commits.split(",") if c]
    r = srm.behavioral_drift(view, _key(args), _cfg(args), lineage)
    lines = _grid(("commit", "digest", "trace_length"), [(c.commit, c.digest, c.trace_length) for c in r.commits])
    lines.append(f"drift pairs: {', '.join(f'{a}->{b}' for a, b in r.drift_pairs) or 'none'}")
    _emit(out, args, r.to_dict(), lines)


def _cmd_snapshots(args, out):
    snaps = _handle(args).snapshots()
    rows = [(s["snapshot_id"], s["parent_id"] or "-", s["operation"], s["timestamp"],
             " ".join(f"{t}={n}" for t, n in s["row_counts"].items())) for s in snaps]
    _emit(out, args, {"snapshots": snaps}, _grid(("id", "parent", "operation", "timestamp", "rows"), rows))


def _cmd_add_column(args, out):
    lh = _handle(args)
    schema = lh.add_column(args.table, args.name, args.type)
    _emit(out, args, {"table": args.table, "snapshot_id": lh.latest_snapshot_id(), "schema": schema.to_dict()},
          [f"{args.table}: added {args.name} ({args.type}); schema {schema.schema_id},"
           f" snapshot {lh.latest_snapshot_id()}"])


def _cmd_generate(args, out):
    from .workload import generate_workload

    w = generate_workload(args.problems, args.seed)
    paths = w.write(args.out)
    doc = {
        "problems": w.problems, "seed": w.seed, "observation_rows": w.observation_rows,
        "implementations": w.implementations, "tests": w.tests, "sequences": w.sequences,
        "files": {k: str(p) for k, p in paths.items()},
    }
    _emit(out, args, doc, [
        f"{w.problems} problems: {w.observation_rows:,} observation rows, {w.implementations:,} implementations,"
        f" {w.tests:,} tests, {w.sequences:,} sequences",
    ] + [f"  {k}: {p}" for k, p in paths.items()])


def _cmd_bench(args, out):
    from .bench import run_benchmark

    if args.problems < 1 or args.repetitions < 1:
        raise UsageError("--problems and --repetitions must be >= 1")
    rep = run_benchmark(args.problems, args.seed, args.repetitions, root=args.root,
                        concurrent_writers=args.writers, keep=args.root is not None)
    if args.report:
        with open(args.report, "w") as f:
            f.write(rep.to_json() + "\n")
    _emit(out, args, rep.to_dict(), rep.render().splitlines())


COMMANDS = {
    "init": _cmd_init,
    "ingest-impls": _cmd_ingest,
    "ingest-tests": _cmd_ingest,
    "ingest-obs": _cmd_ingest,
    "partitions": _cmd_partitions,
    "srm": _cmd_srm,
    "cluster": _cmd_cluster,
    "oracle": _cmd_oracle,
    "assess": _cmd_assess,
    "drift": _cmd_drift,
    "snapshots": _cmd_snapshots,
    "add-column": _cmd_add_column,
    "generate": _cmd_generate,
    "bench": _cmd_bench,
}


def run(argv: Optional[Sequence[str]] = None, out: Optional[TextIO] = None, err: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except ObsLakeError as exc:
        err.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_DOMAIN
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
