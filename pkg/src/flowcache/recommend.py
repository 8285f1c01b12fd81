"""Reuse recommendations during composition and storage decisions after runs.

Checking a node matches its composed prefix (the upstream closure) against
stored intermediates. An exact fingerprint hit can be loaded outright; a
candidate with the same structural skeleton but different parameter values
is surfaced with its parameter-match percentage so a person can decide.
Suggestions never auto-apply: the engine only skips after an explicit load
selection.

All operations here are pure reads over rule/store snapshots; concurrent
composition sessions may check simultaneously.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Any, Mapping, Sequence

from . import model
from .mining import AssociationRule, RuleSet, Thresholds
from .model import (
    FlowcacheError,
    ModuleRegistry,
    ProvenanceFingerprint,
    WorkflowGraph,
)
from .store import (
    OUTCOME_EXECUTED,
    ExecutionRecord,
    IntermediateDataset,
    Store,
)


class NodeStatus(str, Enum):
    NOT_CHECKED = "NotChecked"
    CHECKED_NOT_FOUND = "CheckedNotFound"
    CHECKED_FOUND = "CheckedFound"
    LOAD_DATA = "LoadData"


class MatchDomainError(FlowcacheError):
    """Candidate and composed sequences name different modules."""


@dataclass(frozen=True)
class TimeEstimate:
    """History-derived execution time estimate.

    ``ms`` is None when no history covers the target; ``fallback`` marks
    estimates derived from the module's all-states mean rather than the
    exact tool state.
    """

    ms: int | None
    fallback: bool = False


@dataclass(frozen=True)
class Suggestion:
    """One reusable intermediate offered for a composed node."""

    target_node: str
    sid: str
    fingerprint: str
    param_match_pct: int
    est_exec_time_ms: int | None
    est_fallback: bool
    load_time_ms: int
    time_saved_ms: int | None
    load_warning: bool
    rule_confidence: Fraction | None
    created_at: int
    differing_params: tuple[tuple[str, str, Any, Any], ...] = ()

    def to_doc(self) -> dict[str, Any]:
        return {
            "target_node": self.target_node,
            "sid": self.sid,
            "fingerprint": self.fingerprint,
            "param_match_pct": self.param_match_pct,
            "est_exec_time_ms": self.est_exec_time_ms,
            "est_fallback": self.est_fallback,
            "load_time_ms": self.load_time_ms,
            "time_saved_ms": self.time_saved_ms,
            "load_warning": self.load_warning,
            "rule_confidence": (
                [self.rule_confidence.numerator, self.rule_confidence.denominator]
                if self.rule_confidence is not None
                else None
            ),
            "created_at": self.created_at,
            "differing_params": [list(d) for d in self.differing_params],
        }


@dataclass(frozen=True)
class PlanEntry:
    node_id: str
    port: str
    fingerprint: str
    rule: AssociationRule
    reason: str


@dataclass(frozen=True)
class StoragePlan:
    entries: tuple[PlanEntry, ...]


def _round_half_away(x: float) -> int:
    import math

    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def parameter_match(
    candidate_states: Sequence[tuple[str, Mapping[str, Any]]],
    composed_states: Sequence[tuple[str, Mapping[str, Any]]],
    registry: ModuleRegistry,
) -> int:
    """Percent of matched parameters across two aligned state sequences.

    Both sequences must name the same modules in the same positions.
    Only output-affecting parameters enter the denominator; values
    compare by canonical equality. Rounded half away from zero.
    """
    cand_modules = [m for m, _ in candidate_states]
    comp_modules = [m for m, _ in composed_states]
    if cand_modules != comp_modules:
        raise MatchDomainError(
            f"module sequences differ: {cand_modules} vs {comp_modules}"
        )
    matched = 0
    total = 0
    for (module_id, cand_params), (_, comp_params) in zip(candidate_states, composed_states):
        spec = registry.get(module_id)
        for p in spec.params:
            if not p.affects_output:
                continue
            total += 1
            if cand_params.get(p.name) == comp_params.get(p.name):
                matched += 1
    if total == 0:
        return 100
    return _round_half_away(100.0 * matched / total)


def estimate_time(
    module_id: str,
    state_digest: str,
    history: Sequence[ExecutionRecord],
) -> TimeEstimate:
    """Mean execution time of a (module, state) across history.

    Falls back to the module's mean over all states, then to unknown.
    Only genuinely executed events count; loads are not execution time.
    """
    exact: list[int] = []
    module_wide: list[int] = []
    for record in history:
        for ev in record.node_events:
            if ev.outcome != OUTCOME_EXECUTED or ev.module_id != module_id:
                continue
            module_wide.append(ev.exec_time_ms)
            if ev.state_digest == state_digest:
                exact.append(ev.exec_time_ms)
    if exact:
        return TimeEstimate(_round_half_away(sum(exact) / len(exact)), fallback=False)
    if module_wide:
        return TimeEstimate(
            _round_half_away(sum(module_wide) / len(module_wide)), fallback=True
        )
    return TimeEstimate(None)


def estimate_prefix_time(
    graph: WorkflowGraph,
    node_id: str,
    history: Sequence[ExecutionRecord],
) -> TimeEstimate:
    """Estimated time to compute a node's whole upstream closure from scratch.

    Sum of per-node estimates; unknown if any member has no history at all.
    """
    total = 0
    fallback = False
    for nid in sorted(model.upstream_closure(graph, node_id)):
        state = graph.state(nid)
        est = estimate_time(state.module_id, state.state_digest, history)
        if est.ms is None:
            return TimeEstimate(None)
        total += est.ms
        fallback = fallback or est.fallback
    return TimeEstimate(total, fallback)


def rank(suggestions: Sequence[Suggestion]) -> list[Suggestion]:
    """Descending match percent, then time saved, then recency; stable."""
    return sorted(
        suggestions,
        key=lambda s: (
            -s.param_match_pct,
            s.time_saved_ms is None,
            -(s.time_saved_ms or 0),
            -s.created_at,
        ),
    )


def _lineage_states(entries: Sequence[Mapping[str, Any]]) -> list[tuple[str, Mapping[str, Any]]]:
    return [(e["module_id"], e["params"]) for e in entries]


def check(
    graph: WorkflowGraph,
    node_id: str,
    rules: RuleSet,
    store: Store,
    *,
    registry: ModuleRegistry,
    history: Sequence[ExecutionRecord] | None = None,
) -> tuple[NodeStatus, list[Suggestion]]:
    """Match a node's composed prefix against the store.

    Exact-fingerprint hits come back as 100% suggestions and the LoadData
    status; same-skeleton candidates with differing parameters yield
    CheckedFound; no hits yield CheckedNotFound.
    """
    model.require_valid(graph, registry)
    state = graph.state(node_id)
    mod = registry.get(state.module_id)
    if history is None:
        history = store.query_records()

    fps = {
        p.name: str(model._fingerprint_unchecked(graph, node_id, p.name, registry))
        for p in mod.output_ports
    }
    structures = {
        p.name: str(model.structure_digest(graph, node_id, p.name, registry))
        for p in mod.output_ports
    }
    try:
        composed_lineage = model.lineage(graph, node_id, registry)
    except FlowcacheError:
        composed_lineage = None  # too wide to unroll; exact matching still works
    composed_states = (
        [(e.module_id, e.params) for e in composed_lineage]
        if composed_lineage is not None
        else None
    )

    prefix_est = estimate_prefix_time(graph, node_id, history)

    suggestions: list[Suggestion] = []
    exact_found = False
    for entry in store.live_entries():
        is_exact = entry.fingerprint in fps.values()
        is_partial = (not is_exact) and entry.structure in structures.values()
        if not (is_exact or is_partial):
            continue
        differing: tuple[tuple[str, str, Any, Any], ...] = ()
        if is_exact:
            pct = 100
            exact_found = True
        else:
            if composed_states is None or not entry.lineage:
                continue
            cand_states = _lineage_states(entry.lineage)
            if [m for m, _ in cand_states] != [m for m, _ in composed_states]:
                continue
            pct = parameter_match(cand_states, composed_states, registry)
            diffs = []
            for (module_id, cand_params), (_, comp_params) in zip(cand_states, composed_states):
                for p in registry.get(module_id).params:
                    if p.affects_output and cand_params.get(p.name) != comp_params.get(p.name):
                        diffs.append(
                            (module_id, p.name, cand_params.get(p.name), comp_params.get(p.name))
                        )
            differing = tuple(diffs)

        rule_conf: Fraction | None = None
        if entry.rule_key is not None:
            rule = rules.get(entry.rule_key[0], entry.rule_key[1])
            if rule is not None:
                rule_conf = rule.confidence

        est = prefix_est
        load_ms = entry.load_time_ms
        time_saved = est.ms - load_ms if est.ms is not None else None
        warning = est.ms is not None and load_ms > est.ms
        suggestions.append(
            Suggestion(
                target_node=node_id,
                sid=entry.sid,
                fingerprint=entry.fingerprint,
                param_match_pct=pct,
                est_exec_time_ms=est.ms,
                est_fallback=est.fallback,
                load_time_ms=load_ms,
                time_saved_ms=time_saved,
                load_warning=warning,
                rule_confidence=rule_conf,
                created_at=entry.created_at,
                differing_params=differing,
            )
        )

    ranked = rank(suggestions)
    if exact_found:
        return NodeStatus.LOAD_DATA, ranked
    if ranked:
        return NodeStatus.CHECKED_FOUND, ranked
    return NodeStatus.CHECKED_NOT_FOUND, []


def storage_plan(
    graph: WorkflowGraph,
    rules: RuleSet,
    thresholds: Thresholds,
    store: Store,
    *,
    registry: ModuleRegistry,
    completed_nodes: set[str] | None = None,
) -> StoragePlan:
    """Select run outputs to persist.

    An output qualifies when some dataset-to-prefix rule ending at its
    node meets both thresholds and its fingerprint has no live entry. The
    same module sequence already stored under other parameter values is
    planned again for the new state: entries are unique per tool state.
    """
    model.require_valid(graph, registry)
    candidates = model.enumerate_rule_candidates(graph, registry)
    by_terminal: dict[str, list[model.RuleCandidate]] = {}
    for cand in candidates:
        by_terminal.setdefault(cand.path[-1], []).append(cand)

    entries: list[PlanEntry] = []
    nodes = sorted(graph.nodes)
    for node_id in nodes:
        if completed_nodes is not None and node_id not in completed_nodes:
            continue
        best: tuple[Fraction, int, str, AssociationRule] | None = None
        for cand in by_terminal.get(node_id, ()):
            rule = rules.get(cand.dataset_id, cand.sequence)
            if rule is None or not thresholds.met_by(rule):
                continue
            key = (rule.confidence, rule.support, rule.antecedent, rule)
            if best is None or (key[0], key[1]) > (best[0], best[1]):
                best = key
        if best is None:
            continue
        rule = best[3]
        mod = registry.get(graph.state(node_id).module_id)
        for port in mod.output_ports:
            fp = model.fingerprint(graph, node_id, port.name, registry)
            if store.has_live(fp):
                continue
            entries.append(
                PlanEntry(
                    node_id=node_id,
                    port=port.name,
                    fingerprint=str(fp),
                    rule=rule,
                    reason=(
                        f"rule {rule.antecedent}=>[{len(rule.consequent)} modules] "
                        f"support={rule.support} confidence={rule.confidence} "
                        f"meets min_support={thresholds.min_support}, "
                        f"min_confidence={thresholds.min_confidence}"
                    ),
                )
            )
    return StoragePlan(tuple(entries))
