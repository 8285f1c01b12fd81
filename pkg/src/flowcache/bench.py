"""Desk-scale benchmark: replay a workload with and without reuse.

The harness generates a deterministic batch of workflows that share
module prefixes, replays it twice against fresh stores (one arm with
recommendation-driven loading of exact matches, one arm executing
everything), and reports request counts, module executions, timings, and
throughput side by side. "Requests" counts the logical driver
operations a client would issue: composition calls, checks, load
selections, execute, and one status poll per executed module; skipped
modules need no polling, which is where reuse shrinks the request
volume.

Counts are deterministic for a fixed seed and thresholds; wall-clock
figures vary.
"""
from __future__ import annotations

import json
import random
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from . import model, recommend
from .engine import Engine
from .mining import RuleSet, Thresholds, incremental_update
from .model import (
    DataRegistry,
    DatasetRef,
    ExecutorConfig,
    FlowcacheError,
    ModuleRegistry,
    ModuleSpec,
    ParamSpec,
    Port,
    WorkflowGraph,
)
from .store import OUTCOME_EXECUTED, OUTCOME_SKIPPED, Store

DEFAULT_APDEX_THRESHOLD_MS = 500


class DegenerateWorkloadError(FlowcacheError):
    pass


@dataclass(frozen=True)
class ApdexSample:
    """One response-time observation against a satisfaction threshold.

    Satisfied at or under the threshold, tolerating up to four times it,
    frustrated beyond.
    """

    response_time_ms: float
    threshold_ms: float = DEFAULT_APDEX_THRESHOLD_MS

    @property
    def category(self) -> str:
        if self.response_time_ms <= self.threshold_ms:
            return "satisfied"
        if self.response_time_ms <= 4 * self.threshold_ms:
            return "tolerating"
        return "frustrated"


def apdex(samples: Sequence[float], threshold_ms: float = DEFAULT_APDEX_THRESHOLD_MS) -> Fraction:
    """Apdex score: (satisfied + tolerating/2) / total, as an exact rational."""
    if not samples:
        raise FlowcacheError("apdex needs at least one sample")
    if threshold_ms <= 0:
        raise FlowcacheError("apdex threshold must be positive")
    satisfied = 0
    tolerating = 0
    for t in samples:
        category = ApdexSample(t, threshold_ms).category
        if category == "satisfied":
            satisfied += 1
        elif category == "tolerating":
            tolerating += 1
    return Fraction(2 * satisfied + tolerating, 2 * len(samples))


def apdex_display(score: Fraction) -> float:
    """Two-decimal display rounding of an exact score."""
    return round(float(score), 2)


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters of the generated benchmark workload.

    Workflows share a ``shared_prefix_len``-module chain (same modules,
    same parameters, same input dataset) and diverge afterwards, so the
    prefix rule becomes frequent during replay. ``diamond_fraction``
    turns that share of workflows into branch-join shapes after the
    prefix.
    """

    workflows: int = 5
    shared_prefix_len: int = 3
    suffix_len: int = 1
    diamond_fraction: float = 0.0
    module_duration_ms: int = 0
    param_variants: int = 3
    payload_bytes: int = 256
    seed: int = 0


@dataclass
class Workload:
    spec: WorkloadSpec
    registry: ModuleRegistry
    datasets: DataRegistry
    payloads: dict[str, bytes]
    graphs: list[WorkflowGraph]


def _synthetic_module(module_id: str, duration_ms: int, params: tuple[ParamSpec, ...] = ()) -> ModuleSpec:
    return ModuleSpec(
        id=module_id,
        input_ports=(Port("in0", "blob"),),
        output_ports=(Port("out0", "blob"),),
        params=params,
        executor=ExecutorConfig(
            kind="synthetic", duration_ms=duration_ms, transform="concat-digest"
        ),
    )


def gen_workload(spec: WorkloadSpec) -> Workload:
    """Deterministically generate the benchmark workload for a spec."""
    if spec.workflows < 1:
        raise DegenerateWorkloadError("need at least one workflow")
    if spec.shared_prefix_len + spec.suffix_len < 1:
        raise DegenerateWorkloadError("workflows need at least one module")
    rng = random.Random(spec.seed)

    modules: list[ModuleSpec] = []
    for i in range(spec.shared_prefix_len):
        modules.append(
            _synthetic_module(
                f"prep-{i + 1}",
                spec.module_duration_ms,
                (ParamSpec("level", "int", 0),),
            )
        )
    for j in range(spec.suffix_len):
        modules.append(
            _synthetic_module(
                f"stage-{j + 1}",
                spec.module_duration_ms,
                (ParamSpec("variant", "int", 0),),
            )
        )
    join = ModuleSpec(
        id="join",
        input_ports=(Port("in0", "blob"), Port("in1", "blob")),
        output_ports=(Port("out0", "blob"),),
        params=(ParamSpec("variant", "int", 0),),
        executor=ExecutorConfig(
            kind="synthetic", duration_ms=spec.module_duration_ms, transform="concat-digest"
        ),
    )
    modules.append(join)
    registry = ModuleRegistry(modules)

    dataset = DatasetRef("ds-main", "blob", "")
    datasets = DataRegistry([dataset])
    payloads = {"ds-main": bytes(rng.randrange(256) for _ in range(spec.payload_bytes))}

    graphs: list[WorkflowGraph] = []
    for w in range(spec.workflows):
        diamond = rng.random() < spec.diamond_fraction and spec.suffix_len >= 2
        nodes: dict[str, model.ToolState] = {}
        edges: list[model.Edge] = []
        prev: str | None = None
        for i in range(spec.shared_prefix_len):
            nid = f"n{i + 1}"
            nodes[nid] = model.canonical_state(registry.get(f"prep-{i + 1}"), {})
            if prev is not None:
                edges.append(model.Edge(prev, "out0", nid, "in0"))
            prev = nid
        variant = w % max(1, spec.param_variants)
        base = spec.shared_prefix_len
        if diamond and prev is not None:
            left = f"n{base + 1}"
            right = f"n{base + 2}"
            top = f"n{base + 3}"
            nodes[left] = model.canonical_state(
                registry.get("stage-1"), {"variant": variant}
            )
            nodes[right] = model.canonical_state(
                registry.get("stage-2"), {"variant": variant + 1}
            )
            nodes[top] = model.canonical_state(registry.get("join"), {"variant": variant})
            edges.append(model.Edge(prev, "out0", left, "in0"))
            edges.append(model.Edge(prev, "out0", right, "in0"))
            edges.append(model.Edge(left, "out0", top, "in0"))
            edges.append(model.Edge(right, "out0", top, "in1"))
            tail = top
        else:
            tail = prev or ""
            for j in range(spec.suffix_len):
                nid = f"n{base + j + 1}"
                nodes[nid] = model.canonical_state(
                    registry.get(f"stage-{j + 1}"), {"variant": variant}
                )
                if tail:
                    edges.append(model.Edge(tail, "out0", nid, "in0"))
                tail = nid
        first = "n1"
        graphs.append(
            WorkflowGraph(
                workflow_id=f"wf-{w + 1:03d}",
                nodes=nodes,
                edges=tuple(edges),
                input_bindings={(first, "in0"): dataset},
                declared_outputs=((tail, "out0"),),
            )
        )
    return Workload(spec, registry, datasets, payloads, graphs)


@dataclass
class ArmStats:
    name: str
    requests: int = 0
    module_executions: int = 0
    modules_skipped: int = 0
    loads: int = 0
    total_time_ms: float = 0.0
    bytes_in: int = 0
    bytes_out: int = 0
    response_samples_ms: list[float] = field(default_factory=list)

    @property
    def avg_response_ms(self) -> float:
        if not self.response_samples_ms:
            return 0.0
        return sum(self.response_samples_ms) / len(self.response_samples_ms)

    @property
    def throughput_per_s(self) -> float:
        if self.total_time_ms <= 0:
            return 0.0
        return self.requests / (self.total_time_ms / 1000.0)

    @property
    def apdex(self) -> float:
        if not self.response_samples_ms:
            return 0.0
        return apdex_display(apdex(self.response_samples_ms))


@dataclass
class BenchReport:
    spec: WorkloadSpec
    thresholds: Thresholds
    with_reuse: ArmStats
    without_reuse: ArmStats

    @property
    def execution_ratio(self) -> float:
        if self.without_reuse.module_executions == 0:
            return 1.0
        return self.with_reuse.module_executions / self.without_reuse.module_executions

    @property
    def request_ratio(self) -> float:
        if self.without_reuse.requests == 0:
            return 1.0
        return self.with_reuse.requests / self.without_reuse.requests

    @property
    def time_saved_ms(self) -> float:
        return self.without_reuse.total_time_ms - self.with_reuse.total_time_ms


def _composition_requests(graph: WorkflowGraph) -> int:
    # Session create + one call per node, edge, binding, output + execute.
    return (
        1
        + len(graph.nodes)
        + len(graph.edges)
        + len(graph.input_bindings)
        + len(graph.declared_outputs)
        + 1
    )


def _select_exact_loads(
    graph: WorkflowGraph,
    registry: ModuleRegistry,
    rules: RuleSet,
    store: Store,
    history,
) -> list[tuple[str, str]]:
    """Auto-select exact-match suggestions, deepest closures first."""
    hits: list[tuple[int, str, str]] = []
    for node_id in sorted(graph.nodes):
        status, suggestions = recommend.check(
            graph, node_id, rules, store, registry=registry, history=history
        )
        if status is not recommend.NodeStatus.LOAD_DATA:
            continue
        exact = next(s for s in suggestions if s.param_match_pct == 100)
        closure = len(model.upstream_closure(graph, node_id))
        hits.append((closure, node_id, exact.sid))
    hits.sort(key=lambda h: (-h[0], h[1]))
    selected: list[tuple[str, str]] = []
    covered: set[str] = set()
    for closure, node_id, sid in hits:
        if node_id in covered:
            continue
        selected.append((node_id, sid))
        covered |= model.upstream_closure(graph, node_id)
    return selected


def _run_arm(
    workload: Workload,
    thresholds: Thresholds,
    reuse: bool,
    store_dir: Path,
    *,
    workers: int = 1,
    load_latency_ms: int = 0,
) -> ArmStats:
    stats = ArmStats("with_reuse" if reuse else "without_reuse")
    store = Store(store_dir, load_latency_ms=load_latency_ms)
    resolver = lambda ref: workload.payloads[ref.dataset_id]  # noqa: E731
    engine = Engine(
        workload.registry, store, resolver=resolver, thresholds=thresholds
    )
    rules = RuleSet()
    for graph in workload.graphs:
        stats.requests += _composition_requests(graph)
        stats.bytes_in += len(json.dumps(model.workflow_to_doc(graph)))

        selections: list[tuple[str, str]] = []
        if reuse:
            stats.requests += 1  # the check-all call
            history = store.query_records()
            selections = _select_exact_loads(
                graph, workload.registry, rules, store, history
            )
            stats.requests += len(selections)

        t0 = time.perf_counter()
        result = engine.run(graph, selections, worker_limit=workers, rules=rules)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        rules = result.rules

        executed = sum(
            1 for ev in result.record.node_events if ev.outcome == OUTCOME_EXECUTED
        )
        skipped = sum(
            1 for ev in result.record.node_events if ev.outcome == OUTCOME_SKIPPED
        )
        stats.module_executions += executed
        stats.modules_skipped += skipped
        stats.loads += len(selections)
        stats.total_time_ms += elapsed_ms
        stats.requests += executed  # one status poll per executing module
        stats.response_samples_ms.append(elapsed_ms)
        stats.bytes_out += sum(len(p) for p in result.outputs.values())
        stats.bytes_in += sum(
            len(workload.payloads[ref.dataset_id])
            for ref in graph.input_bindings.values()
        )
    return stats


def bench_compare(
    workload: Workload,
    thresholds: Thresholds | None = None,
    *,
    store_root: str | Path | None = None,
    workers: int = 1,
    load_latency_ms: int = 0,
) -> BenchReport:
    """Replay the workload twice, with and without reuse, on clean stores."""
    thresholds = thresholds or Thresholds()
    created_tmp = store_root is None
    root = Path(store_root) if store_root else Path(tempfile.mkdtemp(prefix="flowcache-bench-"))
    try:
        arm_with = _run_arm(
            workload,
            thresholds,
            reuse=True,
            store_dir=root / "with-reuse",
            workers=workers,
            load_latency_ms=load_latency_ms,
        )
        arm_without = _run_arm(
            workload,
            thresholds,
            reuse=False,
            store_dir=root / "without-reuse",
            workers=workers,
            load_latency_ms=load_latency_ms,
        )
    finally:
        if created_tmp:
            shutil.rmtree(root, ignore_errors=True)
    return BenchReport(workload.spec, thresholds, arm_with, arm_without)


def render_report(report: BenchReport) -> str:
    """Plain-text table plus machine-readable metric lines."""
    a, b = report.with_reuse, report.without_reuse
    rows = [
        ("requests", a.requests, b.requests),
        ("module_executions", a.module_executions, b.module_executions),
        ("modules_skipped", a.modules_skipped, b.modules_skipped),
        ("loads", a.loads, b.loads),
        ("total_time_ms", round(a.total_time_ms, 1), round(b.total_time_ms, 1)),
        ("avg_response_ms", round(a.avg_response_ms, 1), round(b.avg_response_ms, 1)),
        ("throughput_per_s", round(a.throughput_per_s, 2), round(b.throughput_per_s, 2)),
        ("bytes_in", a.bytes_in, b.bytes_in),
        ("bytes_out", a.bytes_out, b.bytes_out),
        ("apdex", a.apdex, b.apdex),
    ]
    width = max(len(r[0]) for r in rows)
    lines = [
        f"{'measure':<{width}}  {'with-reuse':>14}  {'without-reuse':>14}",
        f"{'-' * width}  {'-' * 14}  {'-' * 14}",
    ]
    for name, va, vb in rows:
        lines.append(f"{name:<{width}}  {va!s:>14}  {vb!s:>14}")
    lines.append("")
    lines.append(
        f"execution ratio (with/without): {report.execution_ratio:.3f}; "
        f"request ratio: {report.request_ratio:.3f}; "
        f"time saved: {report.time_saved_ms:.1f} ms"
    )
    lines.append("")
    for name, va, vb in rows:
        lines.append(f"bench arm=with-reuse metric={name} value={va}")
        lines.append(f"bench arm=without-reuse metric={name} value={vb}")
    lines.append(f"bench arm=both metric=execution_ratio value={report.execution_ratio:.6f}")
    return "\n".join(lines) + "\n"
