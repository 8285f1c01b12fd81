"""Workflow execution: planning, skipping, running, persisting.

A plan fixes the topological order, the skip set (upstream closures of
nodes whose outputs will be loaded from the store), and the load
bindings. Execution runs ready nodes in parallel up to a worker limit,
loads skipped outputs instead of computing them, persists outputs chosen
by the storage plan, and appends exactly one execution record per run,
success or not.

One engine handle runs one plan at a time; multiple handles may share a
store, whose writes are internally serialized.
"""
from __future__ import annotations

import heapq
import subprocess
import tempfile
import threading
import time
import uuid
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import model, recommend
from .mining import RuleSet, Thresholds, incremental_update, mine
from .model import (
    DatasetRef,
    FlowcacheError,
    ModuleRegistry,
    ModuleSpec,
    ToolState,
    WorkflowGraph,
)
from .store import (
    OUTCOME_EXECUTED,
    OUTCOME_FAILED,
    OUTCOME_SKIPPED,
    CapacityError,
    DuplicateFingerprintError,
    ExecutionRecord,
    IntermediateDataset,
    NodeEvent,
    Store,
)

STATE_PENDING = "pending"
STATE_RUNNING = "running"
STATE_EXECUTED = "executed"
STATE_SKIPPED = "skipped-loaded"
STATE_FAILED = "failed"
STATE_CANCELLED = "cancelled"

TERMINAL_STATES = (STATE_EXECUTED, STATE_SKIPPED, STATE_FAILED, STATE_CANCELLED)


class StaleSelectionError(FlowcacheError):
    """A selected intermediate no longer matches the graph being executed."""


class UnknownSidError(FlowcacheError):
    pass


class ExecutorError(FlowcacheError):
    """A module executor failed: nonzero exit, timeout, or missing output."""


@dataclass(frozen=True)
class ExecutionPlan:
    run_id: str
    topo_order: tuple[str, ...]
    skip_set: frozenset[str]
    load_bindings: Mapping[tuple[str, str], str]  # (node, port) -> sid
    worker_limit: int = 1


def plan(
    graph: WorkflowGraph,
    selections: Sequence[tuple[str, str]],
    *,
    registry: ModuleRegistry,
    store: Store,
    worker_limit: int = 1,
    run_id: str | None = None,
) -> ExecutionPlan:
    """Build an execution plan from load selections.

    The skip set is the union of the selected nodes' upstream closures.
    Each selection must still be live with a fingerprint equal to the
    graph's current fingerprint at that output; anything else means the
    graph was edited after checking and the selection is stale. Outputs
    of skipped nodes other than loaded ports are never materialized, so
    an edge from a skipped node into the executed region that is not a
    load binding also invalidates the selection.
    """
    model.require_valid(graph, registry)
    if worker_limit < 1:
        raise FlowcacheError("worker_limit must be >= 1")

    load_bindings: dict[tuple[str, str], str] = {}
    skip: set[str] = set()
    seen_nodes: set[str] = set()
    for node_id, sid in selections:
        if node_id in seen_nodes:
            raise StaleSelectionError(f"node {node_id!r} selected twice")
        seen_nodes.add(node_id)
        if node_id not in graph.nodes:
            raise model.UnknownNodeError(f"unknown node {node_id!r}")
        entry = store.get_by_sid(sid)
        if entry is None:
            raise UnknownSidError(f"no live intermediate with sid {sid!r}")
        current = model.fingerprint(graph, node_id, entry.producer_port, registry)
        if str(current) != entry.fingerprint:
            raise StaleSelectionError(
                f"intermediate {sid} no longer matches {node_id}:{entry.producer_port}; "
                "re-check after editing"
            )
        load_bindings[(node_id, entry.producer_port)] = sid
        skip |= model.upstream_closure(graph, node_id)

    for e in graph.edges:
        if e.src in skip and e.dst not in skip and (e.src, e.src_port) not in load_bindings:
            raise StaleSelectionError(
                f"{e.dst}:{e.dst_port} needs {e.src}:{e.src_port}, which the "
                "selected loads would skip without materializing"
            )

    return ExecutionPlan(
        run_id=run_id or uuid.uuid4().hex,
        topo_order=tuple(model.topological_order(graph)),
        skip_set=frozenset(skip),
        load_bindings=load_bindings,
        worker_limit=worker_limit,
    )


def _substitute_argv(argv: Sequence[str], mapping: Mapping[str, str]) -> list[str]:
    out = []
    for elem in argv:
        for key, value in mapping.items():
            elem = elem.replace("{" + key + "}", value)
        out.append(elem)
    return out


def run_module(
    module: ModuleSpec,
    state: ToolState,
    inputs: Sequence[bytes],
    *,
    timer: Callable[[], float] = time.perf_counter,
) -> tuple[list[bytes], int]:
    """Run one module on in-memory payloads; returns per-port outputs and
    the measured wall-clock execution time in ms."""
    config = module.executor
    t0 = timer()
    if config.kind == "synthetic":
        if config.duration_ms:
            time.sleep(config.duration_ms / 1000.0)
        payload = _synthetic_transform(config.transform, module, state, inputs)
        outputs = [payload for _ in module.output_ports]
    else:
        outputs = _run_external(config, module, inputs)
    exec_ms = max(0, round((timer() - t0) * 1000))
    if config.kind == "synthetic":
        exec_ms = max(exec_ms, config.duration_ms)
    return outputs, exec_ms


def _synthetic_transform(
    transform: str, module: ModuleSpec, state: ToolState, inputs: Sequence[bytes]
) -> bytes:
    if transform == "identity":
        return b"".join(inputs)
    if transform == "byte-sum":
        return bytes([sum(sum(p) for p in inputs) % 256])
    if transform == "concat-digest":
        # Pure in inputs and output-affecting params; length-prefix each
        # input so boundaries cannot alias.
        import hashlib

        effect = {
            p.name: state.params[p.name] for p in module.params if p.affects_output
        }
        h = hashlib.sha256()
        h.update(model.canonical_params(effect).encode("utf-8"))
        for payload in inputs:
            h.update(len(payload).to_bytes(8, "big"))
            h.update(payload)
        return h.hexdigest().encode("ascii")
    raise ExecutorError(f"unknown synthetic transform {transform!r}")


def _run_external(
    config: model.ExecutorConfig, module: ModuleSpec, inputs: Sequence[bytes]
) -> list[bytes]:
    with tempfile.TemporaryDirectory(prefix="flowcache-exec-") as tmp:
        tmpdir = Path(tmp)
        mapping: dict[str, str] = {}
        for i, payload in enumerate(inputs):
            path = tmpdir / f"in_{i}"
            path.write_bytes(payload)
            mapping[f"in{i}"] = str(path)
        out_paths = []
        for j in range(len(module.output_ports)):
            path = tmpdir / f"out_{j}"
            mapping[f"out{j}"] = str(path)
            out_paths.append(path)
        argv = _substitute_argv(config.argv, mapping)
        timeout = config.timeout_ms / 1000.0 if config.timeout_ms else None
        try:
            proc = subprocess.run(
                argv,
                cwd=config.workdir or tmp,
                capture_output=True,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired:
            raise ExecutorError(
                f"module {module.id!r} timed out after {config.timeout_ms} ms"
            ) from None
        except OSError as exc:
            raise ExecutorError(f"module {module.id!r} failed to start: {exc}") from None
        if proc.returncode != 0:
            tail = proc.stderr.decode("utf-8", "replace")[-500:]
            raise ExecutorError(
                f"module {module.id!r} exited {proc.returncode}: {tail}"
            )
        outputs = []
        for path in out_paths:
            if not path.exists():
                raise ExecutorError(
                    f"module {module.id!r} produced no output file {path.name}"
                )
            outputs.append(path.read_bytes())
        return outputs


@dataclass
class RunSummary:
    total_ms: int
    exec_ms: int
    load_ms: int
    est_skipped_ms: int | None
    time_saved_ms: int | None

    def to_doc(self) -> dict[str, Any]:
        return {
            "total_ms": self.total_ms,
            "exec_ms": self.exec_ms,
            "load_ms": self.load_ms,
            "est_skipped_ms": self.est_skipped_ms,
            "time_saved_ms": self.time_saved_ms,
        }


@dataclass
class ExecuteResult:
    record: ExecutionRecord
    outputs: dict[tuple[str, str], bytes]
    rules: RuleSet
    storage_plan: recommend.StoragePlan
    stored_sids: list[str]
    node_states: dict[str, str]
    summary: RunSummary

    @property
    def failed(self) -> bool:
        return any(
            s in (STATE_FAILED, STATE_CANCELLED) for s in self.node_states.values()
        )


def default_resolver(ref: DatasetRef) -> bytes:
    if not ref.uri:
        raise FlowcacheError(f"dataset {ref.dataset_id!r} has no uri to read")
    return Path(ref.uri).read_bytes()


class Engine:
    """Plans and executes workflows against one store.

    ``resolver`` turns a dataset reference into payload bytes (defaults
    to reading ``uri`` as a local path). A single engine instance runs
    one plan at a time.
    """

    def __init__(
        self,
        registry: ModuleRegistry,
        store: Store,
        *,
        resolver: Callable[[DatasetRef], bytes] | None = None,
        thresholds: Thresholds | None = None,
        timer: Callable[[], float] = time.perf_counter,
        clock: Callable[[], int] = lambda: int(time.time() * 1000),
    ):
        self.registry = registry
        self.store = store
        self.resolver = resolver or default_resolver
        self.thresholds = thresholds or Thresholds()
        self._timer = timer
        self._clock = clock
        self._run_lock = threading.Lock()

    def plan(
        self,
        graph: WorkflowGraph,
        selections: Sequence[tuple[str, str]] = (),
        *,
        worker_limit: int = 1,
        run_id: str | None = None,
    ) -> ExecutionPlan:
        return plan(
            graph,
            selections,
            registry=self.registry,
            store=self.store,
            worker_limit=worker_limit,
            run_id=run_id,
        )

    def execute(
        self,
        exec_plan: ExecutionPlan,
        graph: WorkflowGraph,
        *,
        rules: RuleSet | None = None,
        state_sink: Callable[[str, str], None] | None = None,
    ) -> ExecuteResult:
        """Run a plan to completion and append its execution record.

        Dependents of a failed node are cancelled; independent branches
        run to completion. Completed outputs the storage plan selects are
        persisted even when the run as a whole failed.
        """
        with self._run_lock:
            return self._execute(exec_plan, graph, rules, state_sink)

    def _execute(
        self,
        exec_plan: ExecutionPlan,
        graph: WorkflowGraph,
        rules: RuleSet | None,
        state_sink: Callable[[str, str], None] | None,
    ) -> ExecuteResult:
        registry = self.registry
        store = self.store
        model.require_valid(graph, registry)
        history = store.query_records()

        anchor_wall = self._clock()
        anchor_mono = self._timer()

        def now_ms() -> int:
            return anchor_wall + round((self._timer() - anchor_mono) * 1000)

        states: dict[str, str] = {n: STATE_PENDING for n in graph.nodes}

        def set_state(node_id: str, value: str) -> None:
            states[node_id] = value
            if state_sink is not None:
                state_sink(node_id, value)

        fps = model.all_fingerprints(graph, registry)
        events: dict[str, NodeEvent] = {}
        loaded_payloads: dict[tuple[str, str], bytes] = {}
        mem_outputs: dict[tuple[str, str], bytes] = {}
        total_load_ms = 0

        # Pre-run estimate of the work the skip set replaces.
        est_skipped: int | None = 0
        for node_id in sorted(exec_plan.skip_set):
            state = graph.state(node_id)
            est = recommend.estimate_time(state.module_id, state.state_digest, history)
            if est.ms is None:
                est_skipped = None
                break
            est_skipped += est.ms

        # Loads happen first; a selection evicted since planning is stale.
        per_load_ms: dict[str, int] = {}
        for (node_id, port), sid in exec_plan.load_bindings.items():
            entry = store.get_by_sid(sid)
            if entry is None or str(fps[(node_id, port)]) != entry.fingerprint:
                raise StaleSelectionError(
                    f"intermediate {sid} disappeared or diverged before execution"
                )
            t0 = self._timer()
            got = store.get_intermediate(entry.fingerprint)
            if got is None:
                raise StaleSelectionError(f"intermediate {sid} evicted during run")
            load_ms = max(0, round((self._timer() - t0) * 1000))
            total_load_ms += load_ms
            per_load_ms[node_id] = per_load_ms.get(node_id, 0) + load_ms
            payload, _ = got
            loaded_payloads[(node_id, port)] = payload

        for node_id in exec_plan.topo_order:
            if node_id not in exec_plan.skip_set:
                continue
            state = graph.state(node_id)
            outputs = {
                port: str(fps[(node_id, port)])
                for (nid, port) in exec_plan.load_bindings
                if nid == node_id
            }
            events[node_id] = NodeEvent(
                node_id=node_id,
                module_id=state.module_id,
                state_digest=state.state_digest,
                outcome=OUTCOME_SKIPPED,
                exec_time_ms=0,
                load_time_ms=per_load_ms.get(node_id, 0),
                inputs={},
                outputs=outputs,
                started_at=now_ms(),
                finished_at=now_ms(),
            )
            set_state(node_id, STATE_SKIPPED)

        # Dataflow bookkeeping for the executed region.
        edge_sources: dict[tuple[str, str], model.Edge] = {}
        for e in graph.edges:
            edge_sources[(e.dst, e.dst_port)] = e
        run_nodes = [n for n in exec_plan.topo_order if n not in exec_plan.skip_set]
        remaining = {
            n: sum(
                1
                for e in graph.edges
                if e.dst == n and e.src not in exec_plan.skip_set
            )
            for n in run_nodes
        }

        def gather_inputs(node_id: str) -> list[bytes]:
            state = graph.state(node_id)
            mod = registry.get(state.module_id)
            payloads = []
            for p in mod.input_ports:
                binding = graph.input_bindings.get((node_id, p.name))
                if binding is not None:
                    payloads.append(self.resolver(binding))
                    continue
                e = edge_sources[(node_id, p.name)]
                if e.src in exec_plan.skip_set:
                    payloads.append(loaded_payloads[(e.src, e.src_port)])
                else:
                    payloads.append(mem_outputs[(e.src, e.src_port)])
            return payloads

        def input_fps(node_id: str) -> dict[str, str]:
            state = graph.state(node_id)
            mod = registry.get(state.module_id)
            out: dict[str, str] = {}
            for p in mod.input_ports:
                binding = graph.input_bindings.get((node_id, p.name))
                if binding is not None:
                    out[p.name] = str(model.dataset_fingerprint(binding.dataset_id))
                else:
                    e = edge_sources[(node_id, p.name)]
                    out[p.name] = str(fps[(e.src, e.src_port)])
            return out

        def run_node(node_id: str) -> tuple[str, list[bytes] | None, int, int, int, str]:
            started = now_ms()
            state = graph.state(node_id)
            mod = registry.get(state.module_id)
            try:
                payloads = gather_inputs(node_id)
                outputs, exec_ms = run_module(mod, state, payloads, timer=self._timer)
                return node_id, outputs, exec_ms, started, now_ms(), ""
            except Exception as exc:  # noqa: BLE001 - failure is a result here
                return node_id, None, max(0, now_ms() - started), started, now_ms(), str(exc)

        total_exec_ms = 0
        cancelled: set[str] = set()
        ready: list[str] = [n for n in run_nodes if remaining[n] == 0]
        heapq.heapify(ready)
        futures: dict[Future, str] = {}

        with ThreadPoolExecutor(max_workers=exec_plan.worker_limit) as pool:
            while ready or futures:
                while ready and len(futures) < exec_plan.worker_limit:
                    node_id = heapq.heappop(ready)
                    if node_id in cancelled:
                        continue
                    set_state(node_id, STATE_RUNNING)
                    futures[pool.submit(run_node, node_id)] = node_id
                if not futures:
                    break
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for fut in done:
                    node_id = futures.pop(fut)
                    nid, outputs, exec_ms, started, finished, error = fut.result()
                    state = graph.state(nid)
                    mod = registry.get(state.module_id)
                    if outputs is None:
                        events[nid] = NodeEvent(
                            node_id=nid,
                            module_id=state.module_id,
                            state_digest=state.state_digest,
                            outcome=OUTCOME_FAILED,
                            exec_time_ms=exec_ms,
                            inputs=input_fps(nid),
                            outputs={},
                            started_at=started,
                            finished_at=finished,
                        )
                        set_state(nid, STATE_FAILED)
                        for victim in model.downstream_closure(graph, nid) - {nid}:
                            if victim in exec_plan.skip_set or victim in cancelled:
                                continue
                            if states[victim] == STATE_PENDING:
                                cancelled.add(victim)
                                set_state(victim, STATE_CANCELLED)
                        continue
                    total_exec_ms += exec_ms
                    out_map: dict[str, str] = {}
                    for port, payload in zip((p.name for p in mod.output_ports), outputs):
                        mem_outputs[(nid, port)] = payload
                        out_map[port] = str(fps[(nid, port)])
                    events[nid] = NodeEvent(
                        node_id=nid,
                        module_id=state.module_id,
                        state_digest=state.state_digest,
                        outcome=OUTCOME_EXECUTED,
                        exec_time_ms=exec_ms,
                        inputs=input_fps(nid),
                        outputs=out_map,
                        started_at=started,
                        finished_at=finished,
                    )
                    set_state(nid, STATE_EXECUTED)
                    for e in graph.edges:
                        if e.src != nid or e.dst in exec_plan.skip_set:
                            continue
                        remaining[e.dst] -= 1
                        if remaining[e.dst] == 0 and e.dst not in cancelled:
                            heapq.heappush(ready, e.dst)

        finished_wall = now_ms()
        ordered_events = tuple(
            events[n] for n in exec_plan.topo_order if n in events
        )
        record = ExecutionRecord(
            run_id=exec_plan.run_id,
            workflow_id=graph.workflow_id,
            started_at=anchor_wall,
            finished_at=finished_wall,
            node_events=ordered_events,
            input_datasets=tuple(
                sorted({ref.dataset_id for ref in graph.input_bindings.values()})
            ),
            graph_doc=model.workflow_to_doc(graph),
        )

        # Rules including this run drive the storage decision.
        base_rules = rules if rules is not None else mine(history)
        updated_rules = incremental_update(base_rules, record)
        completed = {
            ev.node_id for ev in ordered_events if ev.outcome == OUTCOME_EXECUTED
        }
        splan = recommend.storage_plan(
            graph,
            updated_rules,
            self.thresholds,
            store,
            registry=registry,
            completed_nodes=completed,
        )
        stored_sids: list[str] = []
        for entry in splan.entries:
            payload = mem_outputs.get((entry.node_id, entry.port))
            if payload is None:
                continue
            state = graph.state(entry.node_id)
            lineage_entries = [
                {
                    "module_id": le.module_id,
                    "params": dict(le.params),
                    "state_digest": le.state_digest,
                }
                for le in model.lineage(graph, entry.node_id, registry)
            ]
            try:
                meta = store.put_intermediate(
                    entry.fingerprint,
                    payload,
                    did=entry.rule.antecedent,
                    producer=(state.module_id, state.state_digest),
                    producer_port=entry.port,
                    structure=str(
                        model.structure_digest(graph, entry.node_id, entry.port, registry)
                    ),
                    lineage=lineage_entries,
                    rule_key=(entry.rule.antecedent, entry.rule.consequent),
                )
            except (CapacityError, DuplicateFingerprintError):
                # Storage is best effort; a full store or a concurrent
                # writer beating us to the fingerprint never fails a run.
                continue
            stored_sids.append(meta.sid)

        store.append_record(record)

        outputs: dict[tuple[str, str], bytes] = {}
        for node_id, port in graph.declared_outputs:
            if (node_id, port) in mem_outputs:
                outputs[(node_id, port)] = mem_outputs[(node_id, port)]
            elif (node_id, port) in loaded_payloads:
                outputs[(node_id, port)] = loaded_payloads[(node_id, port)]

        summary = RunSummary(
            total_ms=finished_wall - anchor_wall,
            exec_ms=total_exec_ms,
            load_ms=total_load_ms,
            est_skipped_ms=est_skipped if exec_plan.skip_set else 0,
            time_saved_ms=(
                est_skipped - total_load_ms if est_skipped is not None else None
            ),
        )
        return ExecuteResult(
            record=record,
            outputs=outputs,
            rules=updated_rules,
            storage_plan=splan,
            stored_sids=stored_sids,
            node_states=dict(states),
            summary=summary,
        )

    def run(
        self,
        graph: WorkflowGraph,
        selections: Sequence[tuple[str, str]] = (),
        *,
        worker_limit: int = 1,
        rules: RuleSet | None = None,
    ) -> ExecuteResult:
        """Plan and execute in one step."""
        exec_plan = self.plan(graph, selections, worker_limit=worker_limit)
        return self.execute(exec_plan, graph, rules=rules)


class RunHandle:
    """Live view of an asynchronous run for status polling.

    Per-node states only move forward (pending, running, then one
    terminal state) and stay frozen once the run finishes.
    """

    def __init__(self, run_id: str, node_ids: Sequence[str]):
        self.run_id = run_id
        self._lock = threading.Lock()
        self._states: dict[str, str] = {n: STATE_PENDING for n in node_ids}
        self._done = threading.Event()
        self._result: ExecuteResult | None = None
        self._error: Exception | None = None

    def _sink(self, node_id: str, state: str) -> None:
        with self._lock:
            self._states[node_id] = state

    def _finish(self, result: ExecuteResult | None, error: Exception | None) -> None:
        with self._lock:
            if result is not None:
                self._states.update(result.node_states)
            self._result = result
            self._error = error
        self._done.set()

    def snapshot(self) -> dict[str, str]:
        with self._lock:
            return dict(self._states)

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def result(self, timeout: float | None = None) -> ExecuteResult:
        if not self._done.wait(timeout):
            raise TimeoutError(f"run {self.run_id} still in progress")
        if self._error is not None:
            raise self._error
        assert self._result is not None
        return self._result


def start_run(
    engine: Engine,
    exec_plan: ExecutionPlan,
    graph: WorkflowGraph,
    *,
    rules: RuleSet | None = None,
    on_done: Callable[[RunHandle], None] | None = None,
) -> RunHandle:
    """Execute a plan on a background thread; returns a pollable handle."""
    handle = RunHandle(exec_plan.run_id, list(graph.nodes))

    def work() -> None:
        try:
            result = engine.execute(exec_plan, graph, rules=rules, state_sink=handle._sink)
            handle._finish(result, None)
        except Exception as exc:  # noqa: BLE001 - reported via the handle
            handle._finish(None, exc)
        if on_done is not None:
            on_done(handle)

    thread = threading.Thread(target=work, name=f"flowcache-run-{exec_plan.run_id[:8]}", daemon=True)
    thread.start()
    return handle
