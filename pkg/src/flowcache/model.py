"""Workflow data model: modules, tool states, graphs, and fingerprints.

A workflow is a DAG of module instances. Each instance carries a tool
state (the complete, canonical parameter assignment of its module), and
every (node, output port) has a provenance fingerprint: a digest of
everything upstream that could influence the bytes produced there. The
fingerprint is the cache key for intermediate results; two outputs with
equal fingerprints are interchangeable.

All values defined here are immutable after construction and safe to
share across threads.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Iterator, Mapping, Sequence

DIGEST_ALGO = "sha256"

PARAM_KINDS = ("int", "float", "string", "bool", "enum")

EXECUTOR_KINDS = ("synthetic", "external-command")
SYNTHETIC_TRANSFORMS = ("identity", "concat-digest", "byte-sum")

# Diamond-shaped sharing expands when a closure is unrolled into its
# lineage walk; beyond this many entries partial matching is skipped.
MAX_LINEAGE_ENTRIES = 4096


class FlowcacheError(Exception):
    """Base class for all package errors."""


class UnknownModuleError(FlowcacheError):
    pass


class UnknownDatasetError(FlowcacheError):
    pass


class UnknownNodeError(FlowcacheError):
    pass


class UnknownParamError(FlowcacheError):
    pass


class ParamKindError(FlowcacheError):
    pass


class WorkflowFormatError(FlowcacheError):
    """A workflow document does not match the expected schema."""


class InvalidGraphError(FlowcacheError):
    def __init__(self, violations: Sequence["Violation"]):
        self.violations = tuple(violations)
        summary = "; ".join(v.message for v in self.violations) or "invalid graph"
        super().__init__(summary)


def _digest(parts: Any) -> str:
    """Hex digest of a JSON-canonicalized structure."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Port:
    name: str
    format: str


@dataclass(frozen=True)
class ParamSpec:
    """One parameter of a module.

    ``affects_output`` marks whether the parameter can change the bytes a
    module produces. Speed-style knobs (worker counts, batch sizes) may
    set it to False; such parameters are excluded from provenance
    fingerprints and from parameter-match percentages.
    """

    name: str
    kind: str
    default: Any
    choices: tuple[str, ...] = ()
    affects_output: bool = True

    def __post_init__(self) -> None:
        if self.kind not in PARAM_KINDS:
            raise ParamKindError(f"unknown param kind {self.kind!r} for {self.name!r}")
        if self.kind == "enum" and not self.choices:
            raise ParamKindError(f"enum param {self.name!r} needs choices")
        object.__setattr__(self, "default", _check_value(self, self.default))


@dataclass(frozen=True)
class ExecutorConfig:
    """How a module runs: a synthetic in-process transform or an external command.

    Synthetic transforms are pure functions of input bytes plus the
    output-affecting parameters; ``duration_ms`` only adds wall time.
    External commands get ``{inN}``/``{outN}`` placeholders substituted
    with input/output file paths.
    """

    kind: str = "synthetic"
    duration_ms: int = 0
    transform: str = "identity"
    argv: tuple[str, ...] = ()
    workdir: str | None = None
    timeout_ms: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in EXECUTOR_KINDS:
            raise FlowcacheError(f"unknown executor kind {self.kind!r}")
        if self.kind == "synthetic" and self.transform not in SYNTHETIC_TRANSFORMS:
            raise FlowcacheError(f"unknown synthetic transform {self.transform!r}")
        if self.kind == "external-command" and not self.argv:
            raise FlowcacheError("external-command executor needs argv")
        object.__setattr__(self, "argv", tuple(self.argv))


@dataclass(frozen=True)
class ModuleSpec:
    """A reusable processing step: typed ports, parameter schema, executor."""

    id: str
    input_ports: tuple[Port, ...]
    output_ports: tuple[Port, ...]
    params: tuple[ParamSpec, ...] = ()
    executor: ExecutorConfig = ExecutorConfig()
    source_ref: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_ports", tuple(self.input_ports))
        object.__setattr__(self, "output_ports", tuple(self.output_ports))
        object.__setattr__(self, "params", tuple(self.params))
        names = [p.name for p in self.input_ports] + [p.name for p in self.output_ports]
        if len(set(names)) != len(names):
            raise FlowcacheError(f"module {self.id!r}: port names must be unique")
        pnames = [p.name for p in self.params]
        if len(set(pnames)) != len(pnames):
            raise FlowcacheError(f"module {self.id!r}: duplicate param names")

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise UnknownParamError(f"module {self.id!r} has no param {name!r}")

    def input_port(self, name: str) -> Port | None:
        return next((p for p in self.input_ports if p.name == name), None)

    def output_port(self, name: str) -> Port | None:
        return next((p for p in self.output_ports if p.name == name), None)


@dataclass(frozen=True)
class DatasetRef:
    """A raw input dataset known to the system."""

    dataset_id: str
    format: str
    uri: str = ""


class ModuleRegistry:
    """System-wide module catalog; ids are unique."""

    def __init__(self, specs: Sequence[ModuleSpec] = ()):
        self._specs: dict[str, ModuleSpec] = {}
        for spec in specs:
            self.add(spec)

    def add(self, spec: ModuleSpec) -> None:
        if spec.id in self._specs:
            raise FlowcacheError(f"duplicate module id {spec.id!r}")
        self._specs[spec.id] = spec

    def get(self, module_id: str) -> ModuleSpec:
        try:
            return self._specs[module_id]
        except KeyError:
            raise UnknownModuleError(f"unknown module {module_id!r}") from None

    def __contains__(self, module_id: str) -> bool:
        return module_id in self._specs

    def __iter__(self) -> Iterator[ModuleSpec]:
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)


class DataRegistry:
    """Catalog of raw input datasets; ids are unique."""

    def __init__(self, refs: Sequence[DatasetRef] = ()):
        self._refs: dict[str, DatasetRef] = {}
        for ref in refs:
            self.add(ref)

    def add(self, ref: DatasetRef) -> None:
        if ref.dataset_id in self._refs:
            raise FlowcacheError(f"duplicate dataset id {ref.dataset_id!r}")
        self._refs[ref.dataset_id] = ref

    def get(self, dataset_id: str) -> DatasetRef:
        try:
            return self._refs[dataset_id]
        except KeyError:
            raise UnknownDatasetError(f"unknown dataset {dataset_id!r}") from None

    def __contains__(self, dataset_id: str) -> bool:
        return dataset_id in self._refs

    def __iter__(self) -> Iterator[DatasetRef]:
        return iter(self._refs.values())

    def __len__(self) -> int:
        return len(self._refs)


def _check_value(spec: ParamSpec, value: Any) -> Any:
    """Type-check a raw value against a param spec; returns the canonical value."""
    kind = spec.kind
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParamKindError(f"param {spec.name!r}: expected int, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParamKindError(f"param {spec.name!r}: expected float, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ParamKindError(f"param {spec.name!r}: non-finite float")
        return value
    if kind == "string":
        if not isinstance(value, str):
            raise ParamKindError(f"param {spec.name!r}: expected string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ParamKindError(f"param {spec.name!r}: expected bool, got {value!r}")
        return value
    if kind == "enum":
        if not isinstance(value, str) or value not in spec.choices:
            raise ParamKindError(
                f"param {spec.name!r}: {value!r} not in {list(spec.choices)}"
            )
        return value
    raise ParamKindError(f"unknown kind {kind!r}")


def canonical_params(params: Mapping[str, Any]) -> str:
    """Canonical serialization used for state digests.

    Keys sorted; floats take their shortest round-trip representation.
    """
    return json.dumps(dict(params), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ToolState:
    """Complete canonical parameter assignment of one module instance.

    ``state_digest`` identifies the full assignment; ``effect_digest``
    covers only output-affecting parameters and is what fingerprints use.
    """

    module_id: str
    params: Mapping[str, Any]
    state_digest: str
    effect_digest: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


def canonical_state(module: ModuleSpec, overrides: Mapping[str, Any] | None = None) -> ToolState:
    """Build the canonical tool state for a module from partial overrides.

    Defaults fill unnamed params. Idempotent: feeding a state's full
    params back yields an equal state. Raises on unknown names or value
    kind mismatches.
    """
    overrides = dict(overrides or {})
    known = {p.name for p in module.params}
    unknown = set(overrides) - known
    if unknown:
        raise UnknownParamError(
            f"module {module.id!r}: unknown params {sorted(unknown)}"
        )
    params: dict[str, Any] = {}
    effect: dict[str, Any] = {}
    for p in sorted(module.params, key=lambda p: p.name):
        value = _check_value(p, overrides[p.name]) if p.name in overrides else p.default
        params[p.name] = value
        if p.affects_output:
            effect[p.name] = value
    state_digest = _digest(["state", module.id, canonical_params(params)])
    effect_digest = _digest(["state", module.id, canonical_params(effect)])
    return ToolState(module.id, params, state_digest, effect_digest)


@dataclass(frozen=True)
class Edge:
    src: str
    src_port: str
    dst: str
    dst_port: str


@dataclass(frozen=True)
class WorkflowGraph:
    """The workflow DAG: nodes with tool states, dataflow edges, dataset
    bindings for source inputs, and declared outputs."""

    workflow_id: str
    nodes: Mapping[str, ToolState]
    edges: tuple[Edge, ...] = ()
    input_bindings: Mapping[tuple[str, str], DatasetRef] = field(default_factory=dict)
    declared_outputs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(
            self, "input_bindings", MappingProxyType(dict(self.input_bindings))
        )
        object.__setattr__(
            self, "declared_outputs", tuple(tuple(o) for o in self.declared_outputs)
        )

    def state(self, node_id: str) -> ToolState:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"unknown node {node_id!r}") from None


@dataclass(frozen=True)
class Violation:
    """One structural problem found by validation."""

    kind: str
    nodes: tuple[str, ...]
    message: str


def validate_graph(graph: WorkflowGraph, registry: ModuleRegistry) -> list[Violation]:
    """Report every structural violation in a graph; empty list means valid.

    Violations are data, not failures: cycles, unbound or multiply bound
    input ports, dangling edge endpoints, unknown modules or ports, and
    format mismatches between connected endpoints.
    """
    violations: list[Violation] = []
    node_modules: dict[str, ModuleSpec] = {}
    for node_id, state in graph.nodes.items():
        if state.module_id not in registry:
            violations.append(
                Violation("unknown-module", (node_id,),
                          f"node {node_id!r} references unknown module {state.module_id!r}")
            )
        else:
            node_modules[node_id] = registry.get(state.module_id)

    # Edge endpoint and format checks.
    inbound: dict[tuple[str, str], int] = {}
    for e in graph.edges:
        dangling = [n for n in (e.src, e.dst) if n not in graph.nodes]
        if dangling:
            violations.append(
                Violation("dangling-edge", tuple(dangling),
                          f"edge {e.src}:{e.src_port}->{e.dst}:{e.dst_port} references missing node(s) {dangling}")
            )
            continue
        src_mod = node_modules.get(e.src)
        dst_mod = node_modules.get(e.dst)
        src_port = src_mod.output_port(e.src_port) if src_mod else None
        dst_port = dst_mod.input_port(e.dst_port) if dst_mod else None
        if src_mod and src_port is None:
            violations.append(
                Violation("unknown-port", (e.src,),
                          f"node {e.src!r} has no output port {e.src_port!r}")
            )
        if dst_mod and dst_port is None:
            violations.append(
                Violation("unknown-port", (e.dst,),
                          f"node {e.dst!r} has no input port {e.dst_port!r}")
            )
        if src_port and dst_port and src_port.format != dst_port.format:
            violations.append(
                Violation("format-mismatch", (e.src, e.dst),
                          f"{e.src}:{e.src_port} produces {src_port.format!r} but "
                          f"{e.dst}:{e.dst_port} accepts {dst_port.format!r}")
            )
        inbound[(e.dst, e.dst_port)] = inbound.get((e.dst, e.dst_port), 0) + 1

    for (node_id, port), ref in graph.input_bindings.items():
        if node_id not in graph.nodes:
            violations.append(
                Violation("dangling-edge", (node_id,),
                          f"input binding references missing node {node_id!r}")
            )
            continue
        mod = node_modules.get(node_id)
        in_port = mod.input_port(port) if mod else None
        if mod and in_port is None:
            violations.append(
                Violation("unknown-port", (node_id,),
                          f"node {node_id!r} has no input port {port!r}")
            )
        elif in_port and in_port.format != ref.format:
            violations.append(
                Violation("format-mismatch", (node_id,),
                          f"dataset {ref.dataset_id!r} is {ref.format!r} but "
                          f"{node_id}:{port} accepts {in_port.format!r}")
            )
        inbound[(node_id, port)] = inbound.get((node_id, port), 0) + 1

    # Every input port needs exactly one source (edge or dataset binding).
    for node_id, mod in node_modules.items():
        for p in mod.input_ports:
            n = inbound.get((node_id, p.name), 0)
            if n == 0:
                violations.append(
                    Violation("unbound-input", (node_id,),
                              f"input port {node_id}:{p.name} is unbound")
                )
            elif n > 1:
                violations.append(
                    Violation("duplicate-binding", (node_id,),
                              f"input port {node_id}:{p.name} has {n} sources")
                )

    for node_id, port in graph.declared_outputs:
        if node_id not in graph.nodes:
            violations.append(
                Violation("dangling-edge", (node_id,),
                          f"declared output references missing node {node_id!r}")
            )
        else:
            mod = node_modules.get(node_id)
            if mod and mod.output_port(port) is None:
                violations.append(
                    Violation("unknown-port", (node_id,),
                              f"node {node_id!r} has no output port {port!r}")
                )

    for scc in _cyclic_components(graph):
        violations.append(
            Violation("cycle", tuple(sorted(scc)),
                      f"cycle among nodes {sorted(scc)}")
        )
    return violations


def _cyclic_components(graph: WorkflowGraph) -> list[set[str]]:
    """Strongly connected components with more than one node, plus self-loops."""
    adj: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for e in graph.edges:
        if e.src in adj and e.dst in adj:
            adj[e.src].append(e.dst)

    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    result: list[set[str]] = []

    def strongconnect(root: str) -> None:
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(adj[w])))
                    advanced = True
                    break
                elif w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp: set[str] = set()
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.add(w)
                    if w == v:
                        break
                if len(comp) > 1 or any(e.src == v and e.dst == v for e in graph.edges):
                    result.append(comp)

    for n in graph.nodes:
        if n not in index:
            strongconnect(n)
    return result


def require_valid(graph: WorkflowGraph, registry: ModuleRegistry) -> None:
    violations = validate_graph(graph, registry)
    if violations:
        raise InvalidGraphError(violations)


def topological_order(graph: WorkflowGraph) -> list[str]:
    """Deterministic topological order; ready nodes taken lowest id first."""
    import heapq

    indeg = {n: 0 for n in graph.nodes}
    out: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for e in graph.edges:
        indeg[e.dst] += 1
        out[e.src].append(e.dst)
    heap = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(order) != len(graph.nodes):
        raise InvalidGraphError(
            [Violation("cycle", (), "graph contains a cycle")]
        )
    return order


def upstream_closure(graph: WorkflowGraph, node_id: str) -> set[str]:
    """The node and all its ancestors."""
    if node_id not in graph.nodes:
        raise UnknownNodeError(f"unknown node {node_id!r}")
    preds: dict[str, set[str]] = {n: set() for n in graph.nodes}
    for e in graph.edges:
        preds[e.dst].add(e.src)
    seen = {node_id}
    frontier = [node_id]
    while frontier:
        n = frontier.pop()
        for p in preds[n]:
            if p not in seen:
                seen.add(p)
                frontier.append(p)
    return seen


def downstream_closure(graph: WorkflowGraph, node_id: str) -> set[str]:
    """The node and all its descendants."""
    if node_id not in graph.nodes:
        raise UnknownNodeError(f"unknown node {node_id!r}")
    succs: dict[str, set[str]] = {n: set() for n in graph.nodes}
    for e in graph.edges:
        succs[e.src].add(e.dst)
    seen = {node_id}
    frontier = [node_id]
    while frontier:
        n = frontier.pop()
        for s in succs[n]:
            if s not in seen:
                seen.add(s)
                frontier.append(s)
    return seen


@dataclass(frozen=True)
class ProvenanceFingerprint:
    """Digest over the upstream closure of one (node, output port).

    Covers ancestor tool states (output-affecting params only), the edge
    topology between them, and the ids of bound raw datasets. Independent
    of node ids and insertion order, so structurally identical prefixes
    built in different sessions produce equal fingerprints.
    """

    algo: str
    hex: str

    def __str__(self) -> str:
        return f"{self.algo}:{self.hex}"

    @classmethod
    def parse(cls, text: str) -> "ProvenanceFingerprint":
        algo, _, hexpart = text.partition(":")
        if not hexpart:
            raise FlowcacheError(f"malformed fingerprint {text!r}")
        return cls(algo, hexpart)


def dataset_fingerprint(dataset_id: str) -> ProvenanceFingerprint:
    """Pseudo-fingerprint for a raw dataset consumed at a source port."""
    return ProvenanceFingerprint(DIGEST_ALGO, _digest(["dataset", dataset_id]))


class _ClosureHasher:
    """Merkle-style recursive hashing of upstream closures.

    ``include_state=False`` yields the structural skeleton digest: same
    recursion with parameter digests removed. Two closures with equal
    skeletons differ at most in parameter values.
    """

    def __init__(self, graph: WorkflowGraph, registry: ModuleRegistry, include_state: bool):
        self.graph = graph
        self.registry = registry
        self.include_state = include_state
        self._memo: dict[str, str] = {}
        self._sources: dict[tuple[str, str], tuple[str, Any]] = {}
        for e in graph.edges:
            self._sources[(e.dst, e.dst_port)] = ("edge", e)
        for key, ref in graph.input_bindings.items():
            self._sources[key] = ("dataset", ref)

    def node_digest(self, node_id: str) -> str:
        memo = self._memo
        if node_id in memo:
            return memo[node_id]
        # Iterative post-order; recursion depth would track chain length.
        stack = [(node_id, False)]
        while stack:
            nid, expanded = stack.pop()
            if nid in memo:
                continue
            state = self.graph.state(nid)
            mod = self.registry.get(state.module_id)
            if not expanded:
                stack.append((nid, True))
                for p in mod.input_ports:
                    kind, payload = self._sources[(nid, p.name)]
                    if kind == "edge" and payload.src not in memo:
                        stack.append((payload.src, False))
                continue
            parts: list[Any] = ["module", mod.id]
            if self.include_state:
                parts += ["state", state.effect_digest]
            inputs: list[Any] = []
            for p in mod.input_ports:
                kind, payload = self._sources[(nid, p.name)]
                if kind == "dataset":
                    inputs.append(["dataset", p.name, payload.dataset_id])
                else:
                    inputs.append(
                        ["edge", p.name, payload.src_port, memo[payload.src]]
                    )
            parts += ["inputs", inputs]
            memo[nid] = _digest(parts)
        return memo[node_id]

    def port_digest(self, node_id: str, port: str) -> str:
        return _digest(["output", self.node_digest(node_id), port])


def fingerprint(
    graph: WorkflowGraph,
    node_id: str,
    port: str,
    registry: ModuleRegistry,
) -> ProvenanceFingerprint:
    """Provenance fingerprint of the intermediate produced at (node, port)."""
    require_valid(graph, registry)
    return _fingerprint_unchecked(graph, node_id, port, registry)


def _fingerprint_unchecked(
    graph: WorkflowGraph, node_id: str, port: str, registry: ModuleRegistry
) -> ProvenanceFingerprint:
    state = graph.state(node_id)
    mod = registry.get(state.module_id)
    if mod.output_port(port) is None:
        raise UnknownNodeError(f"node {node_id!r} has no output port {port!r}")
    hasher = _ClosureHasher(graph, registry, include_state=True)
    return ProvenanceFingerprint(DIGEST_ALGO, hasher.port_digest(node_id, port))


def structure_digest(
    graph: WorkflowGraph,
    node_id: str,
    port: str,
    registry: ModuleRegistry,
) -> ProvenanceFingerprint:
    """Skeleton digest of the closure: modules, wiring, datasets; no params."""
    state = graph.state(node_id)
    mod = registry.get(state.module_id)
    if mod.output_port(port) is None:
        raise UnknownNodeError(f"node {node_id!r} has no output port {port!r}")
    hasher = _ClosureHasher(graph, registry, include_state=False)
    return ProvenanceFingerprint(DIGEST_ALGO, hasher.port_digest(node_id, port))


def all_fingerprints(
    graph: WorkflowGraph, registry: ModuleRegistry
) -> dict[tuple[str, str], ProvenanceFingerprint]:
    """Fingerprints for every (node, output port) of a valid graph."""
    require_valid(graph, registry)
    hasher = _ClosureHasher(graph, registry, include_state=True)
    result: dict[tuple[str, str], ProvenanceFingerprint] = {}
    for node_id, state in graph.nodes.items():
        mod = registry.get(state.module_id)
        for p in mod.output_ports:
            result[(node_id, p.name)] = ProvenanceFingerprint(
                DIGEST_ALGO, hasher.port_digest(node_id, p.name)
            )
    return result


@dataclass(frozen=True)
class LineageEntry:
    """One position in the unrolled closure walk of an intermediate."""

    module_id: str
    params: Mapping[str, Any]
    state_digest: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


def lineage(
    graph: WorkflowGraph, node_id: str, registry: ModuleRegistry
) -> tuple[LineageEntry, ...]:
    """Unroll the closure of a node into a deterministic state sequence.

    Pre-order walk from the node, descending input ports in declared
    order; nodes shared by several paths repeat, mirroring the shape the
    fingerprint recursion hashes. Two closures with equal skeleton
    digests produce position-aligned walks, which is what makes
    parameter-by-parameter comparison meaningful.
    """
    sources: dict[tuple[str, str], Edge] = {}
    for e in graph.edges:
        sources[(e.dst, e.dst_port)] = e
    out: list[LineageEntry] = []

    stack = [node_id]
    while stack:
        nid = stack.pop()
        state = graph.state(nid)
        mod = registry.get(state.module_id)
        out.append(LineageEntry(state.module_id, state.params, state.state_digest))
        if len(out) > MAX_LINEAGE_ENTRIES:
            raise FlowcacheError(
                f"lineage of {node_id!r} exceeds {MAX_LINEAGE_ENTRIES} entries"
            )
        # Reverse so the first declared port is walked first.
        for p in reversed(mod.input_ports):
            e = sources.get((nid, p.name))
            if e is not None:
                stack.append(e.src)
    return tuple(out)


@dataclass(frozen=True)
class RuleCandidate:
    """A dataset paired with one source-to-node path prefix."""

    dataset_id: str
    path: tuple[str, ...]
    sequence: tuple[tuple[str, str], ...]  # (module_id, state_digest) per node


def enumerate_rule_candidates(
    graph: WorkflowGraph, registry: ModuleRegistry
) -> tuple[RuleCandidate, ...]:
    """All (dataset, path-prefix) pairs reachable from each input binding.

    Every prefix of every maximal path starting at a dataset-bound node
    appears exactly once per dataset. Sequences carry the tool-state
    digests of their modules, so the same module chain under different
    parameter sets yields distinct candidates.
    """
    require_valid(graph, registry)
    out_edges: dict[str, list[Edge]] = {n: [] for n in graph.nodes}
    for e in graph.edges:
        out_edges[e.src].append(e)
    for edges in out_edges.values():
        edges.sort(key=lambda e: (e.dst, e.dst_port, e.src_port))

    seen: set[tuple[str, tuple[str, ...]]] = set()
    result: list[RuleCandidate] = []
    starts = sorted(
        {(ref.dataset_id, node_id) for (node_id, _), ref in graph.input_bindings.items()}
    )
    for dataset_id, start in starts:
        stack: list[tuple[str, ...]] = [(start,)]
        while stack:
            path = stack.pop()
            key = (dataset_id, path)
            if key not in seen:
                seen.add(key)
                seq = tuple(
                    (graph.state(n).module_id, graph.state(n).state_digest) for n in path
                )
                result.append(RuleCandidate(dataset_id, path, seq))
            last = path[-1]
            for e in out_edges[last]:
                if e.dst not in path:  # acyclic anyway; guards repeated ids
                    stack.append(path + (e.dst,))
    result.sort(key=lambda c: (c.dataset_id, c.path))
    return tuple(result)


# ---------------------------------------------------------------------------
# Workflow document I/O. Field names are fixed; unknown fields are rejected.
# ---------------------------------------------------------------------------

_WORKFLOW_FIELDS = {"workflow_id", "nodes", "edges", "inputs", "outputs"}
_NODE_FIELDS = {"node_id", "module_id", "params"}
_EDGE_FIELDS = {"from", "from_port", "to", "to_port"}
_INPUT_FIELDS = {"node_id", "port", "dataset_id"}
_OUTPUT_FIELDS = {"node_id", "port"}


def _check_fields(obj: Mapping[str, Any], allowed: set[str], where: str) -> None:
    if not isinstance(obj, Mapping):
        raise WorkflowFormatError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise WorkflowFormatError(f"{where}: unknown fields {sorted(unknown)}")


def workflow_from_doc(
    doc: Mapping[str, Any],
    registry: ModuleRegistry,
    datasets: DataRegistry,
) -> WorkflowGraph:
    """Build a graph from its document form; strict about field names."""
    _check_fields(doc, _WORKFLOW_FIELDS, "workflow")
    try:
        workflow_id = doc["workflow_id"]
    except KeyError:
        raise WorkflowFormatError("workflow: missing workflow_id") from None

    nodes: dict[str, ToolState] = {}
    for i, node in enumerate(doc.get("nodes", [])):
        _check_fields(node, _NODE_FIELDS, f"nodes[{i}]")
        node_id = node["node_id"]
        if node_id in nodes:
            raise WorkflowFormatError(f"duplicate node_id {node_id!r}")
        module = registry.get(node["module_id"])
        nodes[node_id] = canonical_state(module, node.get("params", {}))

    edges = []
    for i, edge in enumerate(doc.get("edges", [])):
        _check_fields(edge, _EDGE_FIELDS, f"edges[{i}]")
        edges.append(Edge(edge["from"], edge["from_port"], edge["to"], edge["to_port"]))

    bindings: dict[tuple[str, str], DatasetRef] = {}
    for i, binding in enumerate(doc.get("inputs", [])):
        _check_fields(binding, _INPUT_FIELDS, f"inputs[{i}]")
        key = (binding["node_id"], binding["port"])
        if key in bindings:
            raise WorkflowFormatError(f"inputs[{i}]: port {key} bound twice")
        bindings[key] = datasets.get(binding["dataset_id"])

    outputs = []
    for i, output in enumerate(doc.get("outputs", [])):
        _check_fields(output, _OUTPUT_FIELDS, f"outputs[{i}]")
        outputs.append((output["node_id"], output["port"]))

    return WorkflowGraph(workflow_id, nodes, tuple(edges), bindings, tuple(outputs))


def workflow_to_doc(graph: WorkflowGraph) -> dict[str, Any]:
    """Document form of a graph, matching the workflow file schema."""
    return {
        "workflow_id": graph.workflow_id,
        "nodes": [
            {"node_id": n, "module_id": s.module_id, "params": dict(s.params)}
            for n, s in graph.nodes.items()
        ],
        "edges": [
            {"from": e.src, "from_port": e.src_port, "to": e.dst, "to_port": e.dst_port}
            for e in graph.edges
        ],
        "inputs": [
            {"node_id": n, "port": p, "dataset_id": ref.dataset_id}
            for (n, p), ref in graph.input_bindings.items()
        ],
        "outputs": [
            {"node_id": n, "port": p} for n, p in graph.declared_outputs
        ],
    }


def load_workflow(path: str, registry: ModuleRegistry, datasets: DataRegistry) -> WorkflowGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WorkflowFormatError(f"{path}: {exc}") from None
    return workflow_from_doc(doc, registry, datasets)


# ---------------------------------------------------------------------------
# Registry file loaders (modules.json / datasets.json).
# ---------------------------------------------------------------------------

def module_from_doc(doc: Mapping[str, Any]) -> ModuleSpec:
    allowed = {"id", "input_ports", "output_ports", "params", "executor", "source_ref"}
    _check_fields(doc, allowed, "module")
    params = []
    for p in doc.get("params", []):
        _check_fields(p, {"name", "kind", "default", "choices", "affects_output"}, "param")
        params.append(
            ParamSpec(
                p["name"], p["kind"], p["default"],
                tuple(p.get("choices", ())), p.get("affects_output", True),
            )
        )
    exec_doc = dict(doc.get("executor", {}))
    _check_fields(
        exec_doc,
        {"kind", "duration_ms", "transform", "argv", "workdir", "timeout_ms"},
        "executor",
    )
    executor = ExecutorConfig(
        kind=exec_doc.get("kind", "synthetic"),
        duration_ms=exec_doc.get("duration_ms", 0),
        transform=exec_doc.get("transform", "identity"),
        argv=tuple(exec_doc.get("argv", ())),
        workdir=exec_doc.get("workdir"),
        timeout_ms=exec_doc.get("timeout_ms"),
    )
    return ModuleSpec(
        id=doc["id"],
        input_ports=tuple(Port(p["name"], p["format"]) for p in doc.get("input_ports", [])),
        output_ports=tuple(Port(p["name"], p["format"]) for p in doc.get("output_ports", [])),
        params=tuple(params),
        executor=executor,
        source_ref=doc.get("source_ref", ""),
    )


def module_to_doc(spec: ModuleSpec) -> dict[str, Any]:
    return {
        "id": spec.id,
        "input_ports": [{"name": p.name, "format": p.format} for p in spec.input_ports],
        "output_ports": [{"name": p.name, "format": p.format} for p in spec.output_ports],
        "params": [
            {
                "name": p.name,
                "kind": p.kind,
                "default": p.default,
                "choices": list(p.choices),
                "affects_output": p.affects_output,
            }
            for p in spec.params
        ],
        "executor": {
            "kind": spec.executor.kind,
            "duration_ms": spec.executor.duration_ms,
            "transform": spec.executor.transform,
            "argv": list(spec.executor.argv),
            "workdir": spec.executor.workdir,
            "timeout_ms": spec.executor.timeout_ms,
        },
        "source_ref": spec.source_ref,
    }


def load_module_registry(path: str) -> ModuleRegistry:
    with open(path, "r", encoding="utf-8") as fh:
        docs = json.load(fh)
    return ModuleRegistry([module_from_doc(d) for d in docs])


def load_data_registry(path: str) -> DataRegistry:
    with open(path, "r", encoding="utf-8") as fh:
        docs = json.load(fh)
    refs = []
    for d in docs:
        _check_fields(d, {"dataset_id", "format", "uri"}, "dataset")
        refs.append(DatasetRef(d["dataset_id"], d["format"], d.get("uri", "")))
    return DataRegistry(refs)
