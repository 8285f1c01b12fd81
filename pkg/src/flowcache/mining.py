"""Association rules between input datasets and module sequences.

A rule ``D => (m1@s1, ..., mk@sk)`` says: runs that take dataset D as
input tend to contain this module path with these exact tool states.
Support counts the runs in which the pair co-occurs (once per run);
confidence divides by the number of runs using D at all, kept as an
exact rational so threshold comparisons never tie-break on float noise.

Sequences are state-qualified: the same module chain under different
parameter assignments mines to distinct rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .model import FlowcacheError
from .store import (
    OUTCOME_EXECUTED,
    OUTCOME_SKIPPED,
    ExecutionRecord,
)

Sequence_ = tuple[tuple[str, str], ...]  # ((module_id, state_digest), ...)


class UndefinedConfidenceError(FlowcacheError):
    """Confidence is undefined when the dataset has no history at all."""


@dataclass(frozen=True)
class AssociationRule:
    antecedent: str
    consequent: Sequence_
    support: int
    confidence: Fraction
    last_seen: int


def record_sequences(record: ExecutionRecord) -> set[tuple[str, Sequence_]]:
    """All (dataset, state-qualified path prefix) pairs present in one run.

    Walks the recorded graph from every dataset binding, restricted to
    nodes whose events completed (executed or loaded); a path the run
    never finished contributes nothing. Each pair counts once per run.
    """
    ok_nodes: dict[str, str] = {}
    for ev in record.node_events:
        if ev.outcome in (OUTCOME_EXECUTED, OUTCOME_SKIPPED):
            ok_nodes[ev.node_id] = ev.state_digest

    doc = record.graph_doc
    module_of = {n["node_id"]: n["module_id"] for n in doc.get("nodes", [])}
    out_edges: dict[str, list[str]] = {}
    for e in doc.get("edges", []):
        out_edges.setdefault(e["from"], []).append(e["to"])
    for targets in out_edges.values():
        targets.sort()

    starts = sorted(
        {(b["dataset_id"], b["node_id"]) for b in doc.get("inputs", [])}
    )
    found: set[tuple[str, Sequence_]] = set()
    for dataset_id, start in starts:
        if start not in ok_nodes:
            continue
        stack: list[tuple[str, ...]] = [(start,)]
        while stack:
            path = stack.pop()
            seq = tuple((module_of[n], ok_nodes[n]) for n in path)
            found.add((dataset_id, seq))
            for nxt in out_edges.get(path[-1], ()):
                if nxt in ok_nodes and nxt not in path:
                    stack.append(path + (nxt,))
    return found


class RuleSet:
    """Mined rules with their underlying counters.

    Mining is a pure fold over history: updating a set with each record
    of a history, in order, gives exactly the batch-mined result. The
    object itself is not thread safe; share snapshots, not live sets.
    """

    def __init__(self) -> None:
        self._rule_counts: dict[tuple[str, Sequence_], int] = {}
        self._rule_seen: dict[tuple[str, Sequence_], int] = {}
        self._dataset_counts: dict[str, int] = {}
        self._runs = 0

    def copy(self) -> "RuleSet":
        out = RuleSet()
        out._rule_counts = dict(self._rule_counts)
        out._rule_seen = dict(self._rule_seen)
        out._dataset_counts = dict(self._dataset_counts)
        out._runs = self._runs
        return out

    def update(self, record: ExecutionRecord) -> None:
        for did in set(record.input_datasets):
            self._dataset_counts[did] = self._dataset_counts.get(did, 0) + 1
        for key in record_sequences(record):
            self._rule_counts[key] = self._rule_counts.get(key, 0) + 1
            self._rule_seen[key] = max(
                self._rule_seen.get(key, 0), record.finished_at
            )
        self._runs += 1

    @property
    def run_count(self) -> int:
        return self._runs

    def support(self, dataset_id: str, sequence: Sequence[tuple[str, str]]) -> int:
        """Co-occurrence count; zero for anything never seen."""
        return self._rule_counts.get((dataset_id, tuple(sequence)), 0)

    def dataset_support(self, dataset_id: str) -> int:
        """Number of runs whose inputs include the dataset."""
        return self._dataset_counts.get(dataset_id, 0)

    def confidence(self, dataset_id: str, sequence: Sequence[tuple[str, str]]) -> Fraction:
        denom = self.dataset_support(dataset_id)
        if denom == 0:
            raise UndefinedConfidenceError(
                f"dataset {dataset_id!r} has no history; confidence undefined"
            )
        return Fraction(self.support(dataset_id, sequence), denom)

    def get(self, dataset_id: str, sequence: Sequence[tuple[str, str]]) -> AssociationRule | None:
        key = (dataset_id, tuple(sequence))
        count = self._rule_counts.get(key)
        if not count:
            return None
        return AssociationRule(
            antecedent=dataset_id,
            consequent=key[1],
            support=count,
            confidence=Fraction(count, self._dataset_counts[dataset_id]),
            last_seen=self._rule_seen[key],
        )

    def rules(self) -> tuple[AssociationRule, ...]:
        """All rules, ordered by antecedent then sequence."""
        out = []
        for (did, seq) in sorted(self._rule_counts):
            out.append(self.get(did, seq))
        return tuple(out)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RuleSet):
            return NotImplemented
        return (
            self._rule_counts == other._rule_counts
            and self._dataset_counts == other._dataset_counts
            and self._rule_seen == other._rule_seen
        )

    def __len__(self) -> int:
        return len(self._rule_counts)


def mine(history: Iterable[ExecutionRecord]) -> RuleSet:
    """Batch-mine a rule set from execution history."""
    rules = RuleSet()
    for record in history:
        rules.update(record)
    return rules


def incremental_update(rules: RuleSet, record: ExecutionRecord) -> RuleSet:
    """A new rule set equal to re-mining with the record appended.

    Returns a copy so readers holding the old set keep a consistent
    snapshot.
    """
    out = rules.copy()
    out.update(record)
    return out


@dataclass(frozen=True)
class Thresholds:
    """Storage-decision thresholds; a rule qualifies when support and
    confidence both meet their minimum."""

    min_support: int = 2
    min_confidence: Fraction = Fraction(1, 2)

    def met_by(self, rule: AssociationRule) -> bool:
        return rule.support >= self.min_support and rule.confidence >= self.min_confidence


def format_sequence(sequence: Sequence[tuple[str, str]]) -> str:
    return ",".join(f"{mid}@{digest}" for mid, digest in sequence)


def rules_report_lines(rules: RuleSet) -> list[str]:
    """One line per rule: dataset, state-qualified sequence, support, confidence."""
    lines = []
    for rule in rules.rules():
        conf = rule.confidence
        lines.append(
            f"dataset={rule.antecedent} "
            f"sequence={format_sequence(rule.consequent)} "
            f"support={rule.support} "
            f"confidence={conf.numerator}/{conf.denominator}"
        )
    return lines
