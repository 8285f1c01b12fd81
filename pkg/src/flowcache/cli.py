"""Command-line entry points: validate, run, mine, recommend, serve, bench."""
from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import bench as bench_mod
from . import model, recommend
from .engine import Engine
from .mining import Thresholds, mine, rules_report_lines
from .store import ENV_STORE_DIR, ExecutionRecord, Store


def _load_context(args) -> tuple[model.ModuleRegistry, model.DataRegistry]:
    registry = model.load_module_registry(args.modules)
    datasets = (
        model.load_data_registry(args.datasets)
        if args.datasets
        else model.DataRegistry()
    )
    return registry, datasets


def _add_registry_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--modules", required=True, help="module registry JSON file")
    parser.add_argument("--datasets", help="dataset registry JSON file")


def _store_from_args(args) -> Store:
    root = args.store or os.environ.get(ENV_STORE_DIR)
    if root is None:
        raise SystemExit(f"error: --store or {ENV_STORE_DIR} required")
    return Store(root)


def cmd_validate(args) -> int:
    registry, datasets = _load_context(args)
    graph = model.load_workflow(args.workflow, registry, datasets)
    violations = model.validate_graph(graph, registry)
    if not violations:
        print(f"{graph.workflow_id}: valid")
        return 0
    for v in violations:
        print(f"{v.kind}: {v.message}")
    return 1


def cmd_run(args) -> int:
    registry, datasets = _load_context(args)
    graph = model.load_workflow(args.workflow, registry, datasets)
    store = _store_from_args(args)
    engine = Engine(registry, store)
    selections = []
    for item in args.load or []:
        node_id, _, sid = item.partition("=")
        if not sid:
            raise SystemExit(f"error: --load expects node=sid, got {item!r}")
        selections.append((node_id, sid))
    result = engine.run(graph, selections, worker_limit=args.workers)
    print(result.record.to_line())
    return 1 if result.failed else 0


def cmd_mine(args) -> int:
    records = []
    with open(args.history, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ExecutionRecord.from_line(line))
    rules = mine(records)
    for line in rules_report_lines(rules):
        print(line)
    return 0


def cmd_recommend(args) -> int:
    registry, datasets = _load_context(args)
    graph = model.load_workflow(args.workflow, registry, datasets)
    store = _store_from_args(args)
    rules = mine(store.query_records())
    status, suggestions = recommend.check(
        graph, args.node, rules, store, registry=registry
    )
    print(f"node={args.node} status={status.value}")
    for s in suggestions:
        et = s.est_exec_time_ms if s.est_exec_time_ms is not None else "unknown"
        warn = " warning=load-slower-than-exec" if s.load_warning else ""
        print(
            f"  sid={s.sid} match={s.param_match_pct}% est_exec_ms={et} "
            f"load_ms={s.load_time_ms}{warn}"
        )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    registry, datasets = _load_context(args)
    store = _store_from_args(args)
    app = create_app(registry, datasets, store)
    if args.ui:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.ui, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_bench(args) -> int:
    spec = bench_mod.WorkloadSpec(
        workflows=args.workflows,
        shared_prefix_len=args.prefix_len,
        suffix_len=args.suffix_len,
        module_duration_ms=args.duration_ms,
        seed=args.seed,
    )
    thresholds = Thresholds(
        min_support=args.min_support,
        min_confidence=Fraction(args.min_confidence),
    )
    workload = bench_mod.gen_workload(spec)
    report = bench_mod.bench_compare(
        workload,
        thresholds,
        workers=args.workers,
        load_latency_ms=args.load_latency_ms,
    )
    text = bench_mod.render_report(report)
    print(text, end="")
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowcache",
        description="Workflow engine with intermediate-result caching and reuse recommendations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a workflow file")
    p.add_argument("--workflow", required=True)
    _add_registry_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a workflow")
    p.add_argument("--workflow", required=True)
    _add_registry_args(p)
    p.add_argument("--store", help=f"store directory (default ${ENV_STORE_DIR})")
    p.add_argument("--load", action="append", metavar="NODE=SID",
                   help="load a stored intermediate for a node; repeatable")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("mine", help="mine association rules from a history log")
    p.add_argument("--history", required=True, help="path to history.log")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("recommend", help="check a node for reusable intermediates")
    p.add_argument("--workflow", required=True)
    p.add_argument("--node", required=True)
    _add_registry_args(p)
    p.add_argument("--store", help=f"store directory (default ${ENV_STORE_DIR})")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("serve", help="start the HTTP service")
    _add_registry_args(p)
    p.add_argument("--store", help=f"store directory (default ${ENV_STORE_DIR})")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", help="directory of static UI files to serve at /")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="compare replay with and without reuse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workflows", type=int, default=5)
    p.add_argument("--prefix-len", type=int, default=3)
    p.add_argument("--suffix-len", type=int, default=1)
    p.add_argument("--duration-ms", type=int, default=100)
    p.add_argument("--load-latency-ms", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--min-support", type=int, default=2)
    p.add_argument("--min-confidence", default="1/2",
                   help="fraction, e.g. 1/2")
    p.add_argument("--report", help="also write the report to this file")
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except model.FlowcacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
