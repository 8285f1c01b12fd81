"""Shared builders for the test suite."""
from __future__ import annotations

import random
from typing import Any, Mapping, Sequence

from flowcache.model import (
    DataRegistry,
    DatasetRef,
    Edge,
    ExecutorConfig,
    ModuleRegistry,
    ModuleSpec,
    ParamSpec,
    Port,
    ToolState,
    WorkflowGraph,
    canonical_state,
    topological_order,
    workflow_to_doc,
)
from flowcache.store import ExecutionRecord, NodeEvent


def simple_module(
    module_id: str,
    *,
    n_inputs: int = 1,
    n_outputs: int = 1,
    params: Sequence[ParamSpec] = (),
    duration_ms: int = 0,
    transform: str = "concat-digest",
    fmt: str = "blob",
) -> ModuleSpec:
    return ModuleSpec(
        id=module_id,
        input_ports=tuple(Port(f"in{i}", fmt) for i in range(n_inputs)),
        output_ports=tuple(Port(f"out{i}", fmt) for i in range(n_outputs)),
        params=tuple(params),
        executor=ExecutorConfig(
            kind="synthetic", duration_ms=duration_ms, transform=transform
        ),
    )


def ab_params() -> tuple[ParamSpec, ...]:
    return (ParamSpec("a", "int", 1), ParamSpec("b", "int", 2))


def chain_registry(length: int = 3, *, params=None) -> ModuleRegistry:
    params = ab_params() if params is None else params
    return ModuleRegistry(
        [simple_module(f"m{i}", params=params) for i in range(1, length + 1)]
    )


DS1 = DatasetRef("D1", "blob", "")
DS2 = DatasetRef("D2", "blob", "")


def chain_graph(
    registry: ModuleRegistry,
    workflow_id: str = "wf",
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
    length: int = 3,
    dataset: DatasetRef = DS1,
) -> WorkflowGraph:
    overrides = overrides or {}
    nodes = {
        f"n{i}": canonical_state(registry.get(f"m{i}"), overrides.get(f"n{i}", {}))
        for i in range(1, length + 1)
    }
    edges = tuple(
        Edge(f"n{i}", "out0", f"n{i + 1}", "in0") for i in range(1, length)
    )
    return WorkflowGraph(
        workflow_id,
        nodes,
        edges,
        {("n1", "in0"): dataset},
        ((f"n{length}", "out0"),),
    )


def record_for_graph(
    graph: WorkflowGraph,
    run_id: str,
    *,
    exec_times: Mapping[str, int] | None = None,
    outcomes: Mapping[str, str] | None = None,
    started_at: int = 1_000,
) -> ExecutionRecord:
    """A consistent execution record for a graph without running the engine."""
    exec_times = exec_times or {}
    outcomes = outcomes or {}
    events = []
    t = started_at
    for node_id in topological_order(graph):
        outcome = outcomes.get(node_id, "executed")
        if outcome == "cancelled":
            continue
        skipped = outcome == "skipped-loaded"
        events.append(
            NodeEvent(
                node_id=node_id,
                module_id=graph.state(node_id).module_id,
                state_digest=graph.state(node_id).state_digest,
                outcome=outcome,
                exec_time_ms=0 if skipped else exec_times.get(node_id, 1),
                load_time_ms=0 if skipped else None,
                started_at=t,
                finished_at=t + 1,
            )
        )
        t += 2
    return ExecutionRecord(
        run_id=run_id,
        workflow_id=graph.workflow_id,
        started_at=started_at,
        finished_at=t,
        node_events=tuple(events),
        input_datasets=tuple(
            sorted({ref.dataset_id for ref in graph.input_bindings.values()})
        ),
        graph_doc=workflow_to_doc(graph),
    )


def store_output(
    store,
    graph: WorkflowGraph,
    node_id: str,
    port: str,
    registry: ModuleRegistry,
    payload: bytes = b"payload",
    did: str = "D1",
    rule_key=None,
):
    """Persist one graph output with full matching metadata."""
    from flowcache import model as _model

    state = graph.state(node_id)
    lineage = [
        {
            "module_id": le.module_id,
            "params": dict(le.params),
            "state_digest": le.state_digest,
        }
        for le in _model.lineage(graph, node_id, registry)
    ]
    return store.put_intermediate(
        _model.fingerprint(graph, node_id, port, registry),
        payload,
        did=did,
        producer=(state.module_id, state.state_digest),
        producer_port=port,
        structure=str(_model.structure_digest(graph, node_id, port, registry)),
        lineage=lineage,
        rule_key=rule_key,
    )


class ScriptedTimer:
    """perf_counter stand-in returning scripted increments (seconds)."""

    def __init__(self, deltas: Sequence[float]):
        self._now = 0.0
        self._deltas = list(deltas)

    def __call__(self) -> float:
        now = self._now
        if self._deltas:
            self._now += self._deltas.pop(0)
        else:
            self._now += 0.0001
        return now


# ---------------------------------------------------------------------------
# Random DAG corpus generator (seeded, not hypothesis-driven: the corpora
# properties quantify over whole graphs and histories).
# ---------------------------------------------------------------------------

def corpus_registry(n_modules: int = 8, *, rng: random.Random | None = None) -> ModuleRegistry:
    rng = rng or random.Random(0)
    mods = []
    for i in range(1, n_modules + 1):
        n_inputs = 1 if i % 3 else 2
        mods.append(
            simple_module(
                f"mod{i}",
                n_inputs=n_inputs,
                params=(ParamSpec("a", "int", 0), ParamSpec("b", "int", 0)),
            )
        )
    return ModuleRegistry(mods)


CORPUS_DATASETS = (DS1, DS2, DatasetRef("D3", "blob", ""))


def random_graph(
    rng: random.Random,
    registry: ModuleRegistry,
    *,
    workflow_id: str = "wf",
    max_nodes: int = 12,
    max_param: int = 2,
) -> WorkflowGraph:
    """Random valid DAG: edges only point from lower to higher node index."""
    module_ids = [m.id for m in registry]
    k = rng.randint(1, max_nodes)
    nodes: dict[str, ToolState] = {}
    edges: list[Edge] = []
    bindings: dict[tuple[str, str], DatasetRef] = {}
    node_ids = [f"n{i:02d}" for i in range(1, k + 1)]
    for idx, node_id in enumerate(node_ids):
        module = registry.get(rng.choice(module_ids))
        overrides = {
            p.name: rng.randint(0, max_param) for p in module.params
        }
        nodes[node_id] = canonical_state(module, overrides)
        for port in module.input_ports:
            if idx > 0 and rng.random() < 0.7:
                src = node_ids[rng.randrange(idx)]
                src_mod = registry.get(nodes[src].module_id)
                src_port = rng.choice(src_mod.output_ports).name
                edges.append(Edge(src, src_port, node_id, port.name))
            else:
                bindings[(node_id, port.name)] = rng.choice(CORPUS_DATASETS)
    consumed = {e.src for e in edges}
    sinks = [n for n in node_ids if n not in consumed]
    outputs = tuple((n, "out0") for n in sinks)
    return WorkflowGraph(workflow_id, nodes, tuple(edges), bindings, outputs)
