"""HTTP API for composition sessions, recommendation checks, and runs.

Sessions hold a mutable draft workflow plus per-node check status and
cached suggestions. Any edit resets the affected nodes (the edited node
and everything downstream) to NotChecked and drops their suggestions and
load selections; executing re-verifies every selected load against the
draft's current fingerprints, so a stale selection can never run.

Mutations on one session are serialized by a per-session lock; runs
execute on engine worker threads independent of request handling.
"""
from __future__ import annotations

import json
import threading
import uuid
from typing import Any, Mapping

from fastapi import FastAPI, HTTPException, Request, Response
from pydantic import BaseModel, ConfigDict, Field

from . import model, recommend
from .engine import Engine, RunHandle, StaleSelectionError, UnknownSidError, start_run
from .mining import RuleSet, Thresholds, incremental_update, mine, rules_report_lines
from .model import (
    DataRegistry,
    FlowcacheError,
    ModuleRegistry,
    WorkflowGraph,
)
from .recommend import NodeStatus
from .store import Store


class _Draft:
    """Mutable building blocks of a session's workflow."""

    def __init__(self, workflow_id: str):
        self.workflow_id = workflow_id
        self.nodes: dict[str, dict[str, Any]] = {}  # node_id -> {module_id, params}
        self.edges: list[tuple[str, str, str, str]] = []
        self.inputs: dict[tuple[str, str], str] = {}  # (node, port) -> dataset_id
        self.outputs: list[tuple[str, str]] = []

    def materialize(self, registry: ModuleRegistry, datasets: DataRegistry) -> WorkflowGraph:
        states = {
            nid: model.canonical_state(registry.get(n["module_id"]), n["params"])
            for nid, n in self.nodes.items()
        }
        bindings = {
            key: datasets.get(did) for key, did in self.inputs.items()
        }
        return WorkflowGraph(
            self.workflow_id,
            states,
            tuple(model.Edge(*e) for e in self.edges),
            bindings,
            tuple(self.outputs),
        )


class Session:
    def __init__(self, session_id: str, workflow_id: str):
        self.session_id = session_id
        self.draft = _Draft(workflow_id)
        self.statuses: dict[str, NodeStatus] = {}
        self.suggestions: dict[str, list[recommend.Suggestion]] = {}
        self.selected: dict[str, str] = {}  # node_id -> sid
        self.executing_run: str | None = None
        self.lock = threading.Lock()

    def reset_nodes(self, node_ids: set[str]) -> None:
        for nid in node_ids:
            if nid in self.draft.nodes:
                self.statuses[nid] = NodeStatus.NOT_CHECKED
            else:
                self.statuses.pop(nid, None)
            self.suggestions.pop(nid, None)
            self.selected.pop(nid, None)


class AppState:
    def __init__(
        self,
        registry: ModuleRegistry,
        datasets: DataRegistry,
        store: Store,
        *,
        thresholds: Thresholds | None = None,
        resolver=None,
    ):
        self.registry = registry
        self.datasets = datasets
        self.store = store
        self.thresholds = thresholds or Thresholds()
        self.engine = Engine(
            registry, store, resolver=resolver, thresholds=self.thresholds
        )
        self.sessions: dict[str, Session] = {}
        self.runs: dict[str, RunHandle] = {}
        self.rules: RuleSet = mine(store.query_records())
        self.rules_lock = threading.Lock()
        self.request_count = 0

    def rules_snapshot(self) -> RuleSet:
        with self.rules_lock:
            return self.rules

    def absorb_run(self, handle: RunHandle) -> None:
        try:
            result = handle.result(timeout=0)
        except Exception:
            return
        with self.rules_lock:
            self.rules = incremental_update(self.rules, result.record)


# -- request bodies ----------------------------------------------------------


class CreateSessionBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    workflow_id: str | None = None
    workflow: dict[str, Any] | None = None


class NodeBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    node_id: str | None = None
    module_id: str
    params: dict[str, Any] = Field(default_factory=dict)


class ParamsBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    params: dict[str, Any]


class EdgeBody(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    from_: str = Field(alias="from")
    from_port: str
    to: str
    to_port: str
    remove: bool = False


class InputBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    node_id: str
    port: str
    dataset_id: str | None = None
    remove: bool = False


class OutputBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    node_id: str
    port: str
    remove: bool = False


class LoadBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    node_id: str
    sid: str | None = None


class ExecuteBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    workers: int = 1


# -- helpers -----------------------------------------------------------------


def _violations_doc(violations) -> list[dict[str, Any]]:
    return [
        {"kind": v.kind, "nodes": list(v.nodes), "message": v.message}
        for v in violations
    ]


def _record_doc(record) -> dict[str, Any]:
    return json.loads(record.to_line())


def create_app(
    registry: ModuleRegistry,
    datasets: DataRegistry,
    store: Store,
    *,
    thresholds: Thresholds | None = None,
    resolver=None,
) -> FastAPI:
    state = AppState(
        registry, datasets, store, thresholds=thresholds, resolver=resolver
    )
    app = FastAPI(title="flowcache")
    app.state.flowcache = state

    @app.middleware("http")
    async def count_requests(request: Request, call_next):
        state.request_count += 1
        return await call_next(request)

    def get_session(session_id: str) -> Session:
        session = state.sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return session

    def draft_graph(session: Session) -> WorkflowGraph:
        return session.draft.materialize(state.registry, state.datasets)

    def draft_report(session: Session) -> list[dict[str, Any]]:
        graph = draft_graph(session)
        return _violations_doc(model.validate_graph(graph, state.registry))

    def session_doc(session: Session) -> dict[str, Any]:
        graph = draft_graph(session)
        return {
            "session_id": session.session_id,
            "workflow": model.workflow_to_doc(graph),
            "statuses": {n: s.value for n, s in session.statuses.items()},
            "suggestions": {
                n: [s.to_doc() for s in sugg]
                for n, sugg in session.suggestions.items()
            },
            "selected": dict(session.selected),
            "executing_run": session.executing_run,
            "violations": _violations_doc(
                model.validate_graph(graph, state.registry)
            ),
        }

    # -- sessions ------------------------------------------------------------

    @app.post("/sessions")
    def create_session(body: CreateSessionBody | None = None):
        body = body or CreateSessionBody()
        session_id = uuid.uuid4().hex[:12]
        workflow_id = body.workflow_id or f"wf-{session_id}"
        session = Session(session_id, workflow_id)
        if body.workflow is not None:
            try:
                graph = model.workflow_from_doc(
                    body.workflow, state.registry, state.datasets
                )
            except FlowcacheError as exc:
                raise HTTPException(400, str(exc))
            session.draft.workflow_id = graph.workflow_id
            for nid, st in graph.nodes.items():
                session.draft.nodes[nid] = {
                    "module_id": st.module_id,
                    "params": dict(st.params),
                }
                session.statuses[nid] = NodeStatus.NOT_CHECKED
            session.draft.edges = [
                (e.src, e.src_port, e.dst, e.dst_port) for e in graph.edges
            ]
            session.draft.inputs = {
                key: ref.dataset_id for key, ref in graph.input_bindings.items()
            }
            session.draft.outputs = list(graph.declared_outputs)
        state.sessions[session_id] = session
        return {"session_id": session_id, "violations": draft_report(session)}

    @app.get("/sessions/{session_id}")
    def get_session_state(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return session_doc(session)

    @app.post("/sessions/{session_id}/nodes")
    def add_node(session_id: str, body: NodeBody):
        session = get_session(session_id)
        with session.lock:
            node_id = body.node_id or f"n{len(session.draft.nodes) + 1}"
            if node_id in session.draft.nodes:
                raise HTTPException(400, f"node {node_id!r} already exists")
            if body.module_id not in state.registry:
                raise HTTPException(400, f"unknown module {body.module_id!r}")
            try:
                model.canonical_state(state.registry.get(body.module_id), body.params)
            except FlowcacheError as exc:
                raise HTTPException(400, str(exc))
            session.draft.nodes[node_id] = {
                "module_id": body.module_id,
                "params": dict(body.params),
            }
            session.statuses[node_id] = NodeStatus.NOT_CHECKED
            return {"node_id": node_id, "violations": draft_report(session)}

    @app.delete("/sessions/{session_id}/nodes/{node_id}")
    def remove_node(session_id: str, node_id: str):
        session = get_session(session_id)
        with session.lock:
            if node_id not in session.draft.nodes:
                raise HTTPException(404, f"unknown node {node_id!r}")
            graph = draft_graph(session)
            affected = model.downstream_closure(graph, node_id)
            del session.draft.nodes[node_id]
            session.draft.edges = [
                e for e in session.draft.edges if e[0] != node_id and e[2] != node_id
            ]
            session.draft.inputs = {
                k: v for k, v in session.draft.inputs.items() if k[0] != node_id
            }
            session.draft.outputs = [
                o for o in session.draft.outputs if o[0] != node_id
            ]
            session.reset_nodes(affected)
            return {"violations": draft_report(session)}

    @app.put("/sessions/{session_id}/nodes/{node_id}/params")
    def set_params(session_id: str, node_id: str, body: ParamsBody):
        session = get_session(session_id)
        with session.lock:
            if node_id not in session.draft.nodes:
                raise HTTPException(404, f"unknown node {node_id!r}")
            module = state.registry.get(session.draft.nodes[node_id]["module_id"])
            try:
                model.canonical_state(module, body.params)
            except FlowcacheError as exc:
                raise HTTPException(400, str(exc))
            session.draft.nodes[node_id]["params"] = dict(body.params)
            graph = draft_graph(session)
            session.reset_nodes(model.downstream_closure(graph, node_id))
            return {"violations": draft_report(session)}

    @app.post("/sessions/{session_id}/edges")
    def connect(session_id: str, body: EdgeBody):
        session = get_session(session_id)
        with session.lock:
            edge = (body.from_, body.from_port, body.to, body.to_port)
            if body.remove:
                if edge not in session.draft.edges:
                    raise HTTPException(400, "no such edge")
                session.draft.edges.remove(edge)
                graph = draft_graph(session)
                session.reset_nodes(model.downstream_closure(graph, body.to))
                return {"violations": draft_report(session)}

            for endpoint in (body.from_, body.to):
                if endpoint not in session.draft.nodes:
                    raise HTTPException(400, f"unknown node {endpoint!r}")
            if edge in session.draft.edges:
                raise HTTPException(400, "edge already exists")
            session.draft.edges.append(edge)
            graph = draft_graph(session)
            violations = model.validate_graph(graph, state.registry)
            blocking = [
                v
                for v in violations
                if v.kind in ("cycle", "duplicate-binding", "unknown-port", "format-mismatch")
                and (body.to in v.nodes or body.from_ in v.nodes)
            ]
            if blocking:
                session.draft.edges.remove(edge)
                raise HTTPException(
                    400,
                    "; ".join(v.message for v in blocking),
                )
            session.reset_nodes(model.downstream_closure(graph, body.to))
            return {"violations": draft_report(session)}

    @app.post("/sessions/{session_id}/inputs")
    def bind_input(session_id: str, body: InputBody):
        session = get_session(session_id)
        with session.lock:
            if body.node_id not in session.draft.nodes:
                raise HTTPException(400, f"unknown node {body.node_id!r}")
            key = (body.node_id, body.port)
            if body.remove:
                if key not in session.draft.inputs:
                    raise HTTPException(400, "no such binding")
                del session.draft.inputs[key]
            else:
                if body.dataset_id is None:
                    raise HTTPException(400, "dataset_id required")
                if body.dataset_id not in state.datasets:
                    raise HTTPException(400, f"unknown dataset {body.dataset_id!r}")
                if key in session.draft.inputs:
                    raise HTTPException(400, f"port {key} already bound")
                session.draft.inputs[key] = body.dataset_id
            graph = draft_graph(session)
            session.reset_nodes(model.downstream_closure(graph, body.node_id))
            return {"violations": draft_report(session)}

    @app.post("/sessions/{session_id}/outputs")
    def declare_output(session_id: str, body: OutputBody):
        session = get_session(session_id)
        with session.lock:
            target = (body.node_id, body.port)
            if body.remove:
                if target not in session.draft.outputs:
                    raise HTTPException(400, "no such output")
                session.draft.outputs.remove(target)
            else:
                if body.node_id not in session.draft.nodes:
                    raise HTTPException(400, f"unknown node {body.node_id!r}")
                if target not in session.draft.outputs:
                    session.draft.outputs.append(target)
            return {"violations": draft_report(session)}

    # -- checks and loads ------------------------------------------------------

    def check_one(session: Session, node_id: str) -> dict[str, Any]:
        graph = draft_graph(session)
        violations = model.validate_graph(graph, state.registry)
        if violations:
            raise HTTPException(
                400, "draft invalid: " + "; ".join(v.message for v in violations)
            )
        if node_id not in graph.nodes:
            raise HTTPException(404, f"unknown node {node_id!r}")
        status, suggestions = recommend.check(
            graph,
            node_id,
            state.rules_snapshot(),
            state.store,
            registry=state.registry,
        )
        session.statuses[node_id] = status
        session.suggestions[node_id] = suggestions
        return {
            "node_id": node_id,
            "status": status.value,
            "suggestions": [s.to_doc() for s in suggestions],
        }

    @app.post("/sessions/{session_id}/check/{node_id}")
    def check_node(session_id: str, node_id: str):
        session = get_session(session_id)
        with session.lock:
            return check_one(session, node_id)

    @app.post("/sessions/{session_id}/check")
    def check_all(session_id: str):
        session = get_session(session_id)
        with session.lock:
            results = {
                node_id: check_one(session, node_id)
                for node_id in sorted(session.draft.nodes)
            }
            return {"nodes": results}

    @app.post("/sessions/{session_id}/load")
    def select_load(session_id: str, body: LoadBody):
        session = get_session(session_id)
        with session.lock:
            if body.node_id not in session.draft.nodes:
                raise HTTPException(404, f"unknown node {body.node_id!r}")
            if body.sid is None:
                session.selected.pop(body.node_id, None)
                return {"selected": dict(session.selected)}
            current = session.suggestions.get(body.node_id, [])
            if not any(s.sid == body.sid for s in current):
                raise HTTPException(
                    400,
                    f"sid {body.sid!r} is not among node {body.node_id!r}'s current suggestions",
                )
            session.selected[body.node_id] = body.sid
            return {"selected": dict(session.selected)}

    @app.post("/sessions/{session_id}/execute")
    def execute_session(session_id: str, body: ExecuteBody | None = None):
        body = body or ExecuteBody()
        session = get_session(session_id)
        with session.lock:
            if session.executing_run is not None:
                run = state.runs.get(session.executing_run)
                if run is not None and not run.done:
                    raise HTTPException(
                        409, f"session already executing run {session.executing_run}"
                    )
            graph = draft_graph(session)
            violations = model.validate_graph(graph, state.registry)
            if violations:
                raise HTTPException(
                    400, "draft invalid: " + "; ".join(v.message for v in violations)
                )
            selections = sorted(session.selected.items())
            try:
                exec_plan = state.engine.plan(
                    graph, selections, worker_limit=max(1, body.workers)
                )
            except (StaleSelectionError, UnknownSidError) as exc:
                raise HTTPException(409, f"stale suggestion: {exc}")
            except FlowcacheError as exc:
                raise HTTPException(400, str(exc))

            def on_done(handle: RunHandle) -> None:
                state.absorb_run(handle)
                session.executing_run = None

            handle = start_run(
                state.engine,
                exec_plan,
                graph,
                rules=state.rules_snapshot(),
                on_done=on_done,
            )
            state.runs[exec_plan.run_id] = handle
            session.executing_run = exec_plan.run_id
            return {"run_id": exec_plan.run_id}

    # -- runs, metrics, rules, history ---------------------------------------

    @app.get("/runs/{run_id}")
    def run_status(run_id: str):
        handle = state.runs.get(run_id)
        if handle is None:
            raise HTTPException(404, f"unknown run {run_id!r}")
        doc: dict[str, Any] = {
            "run_id": run_id,
            "done": handle.done,
            "states": handle.snapshot(),
        }
        if handle.done:
            try:
                result = handle.result(timeout=0)
            except Exception as exc:  # noqa: BLE001 - surfaced to the client
                doc["error"] = str(exc)
                return doc
            doc["record"] = _record_doc(result.record)
            doc["summary"] = result.summary.to_doc()
            doc["failed"] = result.failed
        return doc

    @app.get("/metrics")
    def metrics():
        s = state.store.stats()
        return {
            "store": {
                "entries": s.entries,
                "bytes": s.live_bytes,
                "capacity_bytes": s.capacity_bytes,
                "hits": s.hits,
                "misses": s.misses,
            },
            "rules": len(state.rules_snapshot()),
            "sessions": len(state.sessions),
            "runs": len(state.runs),
            "requests": state.request_count,
            "history_records": s.records,
        }

    @app.get("/rules")
    def rules_dump():
        lines = rules_report_lines(state.rules_snapshot())
        return Response("\n".join(lines) + ("\n" if lines else ""), media_type="text/plain")

    @app.get("/history")
    def history(
        workflow_id: str | None = None,
        dataset_id: str | None = None,
        since_ms: int | None = None,
        until_ms: int | None = None,
    ):
        records = state.store.query_records(
            workflow_id=workflow_id,
            dataset_id=dataset_id,
            since_ms=since_ms,
            until_ms=until_ms,
        )
        return [_record_doc(r) for r in records]

    @app.get("/modules")
    def modules():
        return [model.module_to_doc(spec) for spec in state.registry]

    @app.get("/datasets")
    def datasets_listing():
        return [
            {"dataset_id": ref.dataset_id, "format": ref.format, "uri": ref.uri}
            for ref in state.datasets
        ]

    return app
