"""Execution history and intermediate-dataset storage.

Two persistent structures live under one store root (selected by the
``FLOWCACHE_STORE_DIR`` environment variable or an explicit path):

* ``history.log`` — append-only newline-delimited execution records with
  self-describing field names. Prior lines are never rewritten.
* ``objects/<first2>/<rest>`` — payload files addressed by provenance
  fingerprint, with metadata kept in ``index.json`` (rewritten atomically
  on every change).

Concurrency: history appends are serialized by a single writer lock;
metadata mutations hold the store lock; payload reads happen outside it
under a pin that shields the entry from eviction. All calls block.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from .model import (
    DIGEST_ALGO,
    FlowcacheError,
    ProvenanceFingerprint,
)

ENV_STORE_DIR = "FLOWCACHE_STORE_DIR"
DEFAULT_CAPACITY_BYTES = 1 << 30

OUTCOME_EXECUTED = "executed"
OUTCOME_SKIPPED = "skipped-loaded"
OUTCOME_FAILED = "failed"
_OUTCOMES = (OUTCOME_EXECUTED, OUTCOME_SKIPPED, OUTCOME_FAILED)


class RecordInvariantError(FlowcacheError):
    """An execution record violates its internal consistency rules."""


class DuplicateRunError(FlowcacheError):
    pass


class DuplicateFingerprintError(FlowcacheError):
    pass


class CapacityError(FlowcacheError):
    """Store is over capacity even after an eviction pass."""


class CorruptPayloadError(FlowcacheError):
    """Stored payload bytes no longer match their content digest."""


@dataclass(frozen=True)
class NodeEvent:
    """What happened to one node during a run."""

    node_id: str
    module_id: str
    state_digest: str
    outcome: str
    exec_time_ms: int
    load_time_ms: int | None = None
    inputs: Mapping[str, str] = field(default_factory=dict)   # port -> fingerprint
    outputs: Mapping[str, str] = field(default_factory=dict)  # port -> fingerprint
    started_at: int = 0
    finished_at: int = 0

    def to_doc(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "module_id": self.module_id,
            "state_digest": self.state_digest,
            "outcome": self.outcome,
            "exec_time_ms": self.exec_time_ms,
            "load_time_ms": self.load_time_ms,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "NodeEvent":
        return cls(
            node_id=doc["node_id"],
            module_id=doc["module_id"],
            state_digest=doc["state_digest"],
            outcome=doc["outcome"],
            exec_time_ms=doc["exec_time_ms"],
            load_time_ms=doc.get("load_time_ms"),
            inputs=dict(doc.get("inputs", {})),
            outputs=dict(doc.get("outputs", {})),
            started_at=doc.get("started_at", 0),
            finished_at=doc.get("finished_at", 0),
        )


@dataclass(frozen=True)
class ExecutionRecord:
    """One workflow run: per-node events plus the graph that was executed.

    The graph snapshot (document form) is what later mining walks to
    recover dataset-to-sequence co-occurrences; node events alone carry
    digests but not topology.
    """

    run_id: str
    workflow_id: str
    started_at: int
    finished_at: int
    node_events: tuple[NodeEvent, ...]
    input_datasets: tuple[str, ...]
    graph_doc: Mapping[str, Any]
    digest_algo: str = DIGEST_ALGO

    def to_line(self) -> str:
        doc = {
            "run_id": self.run_id,
            "workflow_id": self.workflow_id,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "node_events": [e.to_doc() for e in self.node_events],
            "input_datasets": list(self.input_datasets),
            "graph": dict(self.graph_doc),
            "digest_algo": self.digest_algo,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "ExecutionRecord":
        doc = json.loads(line)
        return cls(
            run_id=doc["run_id"],
            workflow_id=doc["workflow_id"],
            started_at=doc["started_at"],
            finished_at=doc["finished_at"],
            node_events=tuple(NodeEvent.from_doc(e) for e in doc["node_events"]),
            input_datasets=tuple(doc["input_datasets"]),
            graph_doc=doc["graph"],
            digest_algo=doc.get("digest_algo", DIGEST_ALGO),
        )


def validate_record(record: ExecutionRecord) -> None:
    """Raise RecordInvariantError on any internal inconsistency."""
    if record.started_at > record.finished_at:
        raise RecordInvariantError(
            f"run {record.run_id}: started_at after finished_at"
        )
    seen_nodes: set[str] = set()
    for ev in record.node_events:
        if ev.outcome not in _OUTCOMES:
            raise RecordInvariantError(f"unknown outcome {ev.outcome!r}")
        if ev.exec_time_ms < 0:
            raise RecordInvariantError(
                f"node {ev.node_id}: negative exec_time_ms {ev.exec_time_ms}"
            )
        if ev.outcome == OUTCOME_SKIPPED:
            if ev.exec_time_ms != 0:
                raise RecordInvariantError(
                    f"node {ev.node_id}: skipped-loaded event with nonzero exec time"
                )
            if ev.load_time_ms is None or ev.load_time_ms < 0:
                raise RecordInvariantError(
                    f"node {ev.node_id}: skipped-loaded event needs load_time_ms >= 0"
                )
        if ev.node_id in seen_nodes:
            raise RecordInvariantError(f"duplicate event for node {ev.node_id}")
        seen_nodes.add(ev.node_id)

    # Event order must be a topological order of the recorded graph,
    # restricted to nodes that actually have events.
    position = {ev.node_id: i for i, ev in enumerate(record.node_events)}
    for edge in record.graph_doc.get("edges", []):
        src, dst = edge.get("from"), edge.get("to")
        if src in position and dst in position and position[src] >= position[dst]:
            raise RecordInvariantError(
                f"events out of topological order: {src} must precede {dst}"
            )


@dataclass
class IntermediateDataset:
    """Metadata for one stored intermediate result.

    ``load_time_ms`` is a per-store rolling estimate: an exponential
    moving average (alpha 0.5) over observed loads, seeded by the first
    load and approximated by the save time until then.
    """

    sid: str
    did: str
    size_bytes: int
    save_time_ms: int
    producer_module: str
    producer_state_digest: str
    producer_port: str
    fingerprint: str
    structure: str
    created_at: int
    payload_uri: str
    payload_digest: str
    lineage: tuple[Mapping[str, Any], ...] = ()
    rule_key: tuple[str, tuple[tuple[str, str], ...]] | None = None
    load_ema_ms: float | None = None
    seq: int = 0  # insertion order; deterministic eviction tie-break

    @property
    def load_time_ms(self) -> int:
        if self.load_ema_ms is None:
            return self.save_time_ms
        return round(self.load_ema_ms)

    @property
    def producer(self) -> tuple[str, str]:
        return (self.producer_module, self.producer_state_digest)

    def to_doc(self) -> dict[str, Any]:
        return {
            "sid": self.sid,
            "did": self.did,
            "size_bytes": self.size_bytes,
            "save_time_ms": self.save_time_ms,
            "producer_module": self.producer_module,
            "producer_state_digest": self.producer_state_digest,
            "producer_port": self.producer_port,
            "fingerprint": self.fingerprint,
            "structure": self.structure,
            "created_at": self.created_at,
            "payload_uri": self.payload_uri,
            "payload_digest": self.payload_digest,
            "lineage": [dict(entry) for entry in self.lineage],
            "rule_key": (
                [self.rule_key[0], [list(p) for p in self.rule_key[1]]]
                if self.rule_key
                else None
            ),
            "load_ema_ms": self.load_ema_ms,
            "seq": self.seq,
            "digest_algo": DIGEST_ALGO,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "IntermediateDataset":
        raw_key = doc.get("rule_key")
        rule_key = None
        if raw_key:
            rule_key = (raw_key[0], tuple(tuple(p) for p in raw_key[1]))
        return cls(
            sid=doc["sid"],
            did=doc["did"],
            size_bytes=doc["size_bytes"],
            save_time_ms=doc["save_time_ms"],
            producer_module=doc["producer_module"],
            producer_state_digest=doc["producer_state_digest"],
            producer_port=doc["producer_port"],
            fingerprint=doc["fingerprint"],
            structure=doc["structure"],
            created_at=doc["created_at"],
            payload_uri=doc["payload_uri"],
            payload_digest=doc["payload_digest"],
            lineage=tuple(doc.get("lineage", ())),
            rule_key=rule_key,
            load_ema_ms=doc.get("load_ema_ms"),
            seq=doc.get("seq", 0),
        )


@dataclass(frozen=True)
class EvictionPolicy:
    """Benefit-greedy eviction: drop lowest-benefit entries first.

    Benefit of an entry defaults to
    ``(mean producer exec time - load time) * rule confidence``; entries
    with no backing rule score zero. Pinned entries are never evicted.
    """

    capacity_bytes: int | None = None
    benefit: Callable[[IntermediateDataset], float] | None = None


def make_benefit_fn(
    rules: Any, records: Sequence[ExecutionRecord]
) -> Callable[[IntermediateDataset], float]:
    """Default benefit: (mean producer exec ms - load ms) * rule confidence."""
    totals: dict[tuple[str, str], list[int]] = {}
    for rec in records:
        for ev in rec.node_events:
            if ev.outcome == OUTCOME_EXECUTED:
                totals.setdefault((ev.module_id, ev.state_digest), []).append(
                    ev.exec_time_ms
                )

    def benefit(entry: IntermediateDataset) -> float:
        confidence = Fraction(0)
        if rules is not None and entry.rule_key is not None:
            rule = rules.get(entry.rule_key[0], entry.rule_key[1])
            if rule is not None:
                confidence = rule.confidence
        samples = totals.get(entry.producer)
        mean_exec = sum(samples) / len(samples) if samples else 0.0
        return (mean_exec - entry.load_time_ms) * float(confidence)

    return benefit


@dataclass(frozen=True)
class StoreStats:
    entries: int
    live_bytes: int
    capacity_bytes: int
    hits: int
    misses: int
    records: int


class Store:
    """Filesystem-backed provenance store.

    ``timer`` returns seconds with sub-millisecond resolution and is used
    to measure save/load durations; ``clock`` returns wall-clock epoch
    milliseconds for timestamps. Both are injectable for tests.
    ``load_latency_ms`` adds a fixed artificial delay to every payload
    load, for benchmark runs that emulate slower storage media.
    """

    def __init__(
        self,
        root: str | os.PathLike[str] | None = None,
        *,
        capacity_bytes: int = DEFAULT_CAPACITY_BYTES,
        policy: EvictionPolicy | None = None,
        timer: Callable[[], float] = time.perf_counter,
        clock: Callable[[], int] = lambda: int(time.time() * 1000),
        load_latency_ms: int = 0,
    ):
        if root is None:
            root = os.environ.get(ENV_STORE_DIR)
        if root is None:
            raise FlowcacheError(
                f"no store root given and {ENV_STORE_DIR} is not set"
            )
        self.root = Path(root)
        self.capacity_bytes = capacity_bytes
        self._policy = policy or EvictionPolicy()
        self._timer = timer
        self._clock = clock
        self._load_latency_ms = load_latency_ms

        self._lock = threading.RLock()
        self._history_lock = threading.Lock()
        self._entries: dict[str, IntermediateDataset] = {}
        self._seq = 0
        self._pins: dict[str, int] = {}
        self._hits = 0
        self._misses = 0
        self._records: list[ExecutionRecord] = []
        self._run_ids: set[str] = set()

        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "objects").mkdir(exist_ok=True)
        self._load_index()
        self._load_history()

    # -- history -----------------------------------------------------------

    @property
    def history_path(self) -> Path:
        return self.root / "history.log"

    def _load_history(self) -> None:
        if not self.history_path.exists():
            return
        with open(self.history_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = ExecutionRecord.from_line(line)
                self._records.append(record)
                self._run_ids.add(record.run_id)

    def append_record(self, record: ExecutionRecord) -> str:
        """Durably append one run; history is never rewritten."""
        validate_record(record)
        with self._history_lock:
            if record.run_id in self._run_ids:
                raise DuplicateRunError(f"run {record.run_id!r} already recorded")
            line = record.to_line()
            with open(self.history_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records.append(record)
            self._run_ids.add(record.run_id)
        return record.run_id

    def query_records(
        self,
        workflow_id: str | None = None,
        dataset_id: str | None = None,
        since_ms: int | None = None,
        until_ms: int | None = None,
    ) -> list[ExecutionRecord]:
        """Matching records in append order; no filter returns everything."""
        with self._history_lock:
            records = list(self._records)
        out = []
        for r in records:
            if workflow_id is not None and r.workflow_id != workflow_id:
                continue
            if dataset_id is not None and dataset_id not in r.input_datasets:
                continue
            if since_ms is not None and r.finished_at < since_ms:
                continue
            if until_ms is not None and r.started_at > until_ms:
                continue
            out.append(r)
        return out

    # -- intermediates ------------------------------------------------------

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def _load_index(self) -> None:
        if not self.index_path.exists():
            return
        with open(self.index_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        for fp, entry_doc in doc.get("entries", {}).items():
            self._entries[fp] = IntermediateDataset.from_doc(entry_doc)
        if self._entries:
            self._seq = max(e.seq for e in self._entries.values()) + 1

    def _write_index(self) -> None:
        doc = {
            "digest_algo": DIGEST_ALGO,
            "capacity_bytes": self.capacity_bytes,
            "entries": {fp: e.to_doc() for fp, e in self._entries.items()},
        }
        tmp = self.index_path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.index_path)

    def _object_path(self, fp_hex: str) -> Path:
        return self.root / "objects" / fp_hex[:2] / fp_hex[2:]

    @staticmethod
    def _fp_str(fingerprint: ProvenanceFingerprint | str) -> str:
        if isinstance(fingerprint, ProvenanceFingerprint):
            return str(fingerprint)
        return fingerprint

    def live_bytes(self) -> int:
        with self._lock:
            return sum(e.size_bytes for e in self._entries.values())

    def live_entries(self) -> list[IntermediateDataset]:
        with self._lock:
            return sorted(self._entries.values(), key=lambda e: (e.created_at, e.sid))

    def has_live(self, fingerprint: ProvenanceFingerprint | str) -> bool:
        with self._lock:
            return self._fp_str(fingerprint) in self._entries

    def get_by_sid(self, sid: str) -> IntermediateDataset | None:
        with self._lock:
            for entry in self._entries.values():
                if entry.sid == sid:
                    return entry
        return None

    @contextmanager
    def pin(self, fingerprint: ProvenanceFingerprint | str) -> Iterator[None]:
        """Shield an entry from eviction, e.g. for the duration of a load."""
        fp = self._fp_str(fingerprint)
        with self._lock:
            self._pins[fp] = self._pins.get(fp, 0) + 1
        try:
            yield
        finally:
            with self._lock:
                self._pins[fp] -= 1
                if self._pins[fp] <= 0:
                    del self._pins[fp]

    def put_intermediate(
        self,
        fingerprint: ProvenanceFingerprint | str,
        payload: bytes,
        *,
        did: str,
        producer: tuple[str, str],
        producer_port: str = "out0",
        structure: str = "",
        lineage: Sequence[Mapping[str, Any]] = (),
        rule_key: tuple[str, tuple[tuple[str, str], ...]] | None = None,
        overwrite: bool = False,
    ) -> IntermediateDataset:
        """Store one payload under its fingerprint; at most one live entry
        per fingerprint. Save time is measured around the write.

        When the store overflows, the eviction pass runs with the new
        entry as an ordinary candidate: if its benefit ranks lowest, the
        put itself is rejected rather than displacing better entries.
        """
        fp = self._fp_str(fingerprint)
        fp_hex = fp.split(":", 1)[-1]
        with self._lock:
            if fp in self._entries and not overwrite:
                raise DuplicateFingerprintError(f"live entry exists for {fp}")
            if fp in self._entries:
                self._delete_entry(fp)

            path = self._object_path(fp_hex)
            path.parent.mkdir(parents=True, exist_ok=True)
            t0 = self._timer()
            tmp = path.with_suffix(".tmp")
            with open(tmp, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
            save_ms = max(0, round((self._timer() - t0) * 1000))

            entry = IntermediateDataset(
                sid=uuid.uuid4().hex,
                did=did,
                size_bytes=len(payload),
                save_time_ms=save_ms,
                producer_module=producer[0],
                producer_state_digest=producer[1],
                producer_port=producer_port,
                fingerprint=fp,
                structure=structure,
                created_at=self._clock(),
                payload_uri=str(path),
                payload_digest=hashlib.sha256(payload).hexdigest(),
                lineage=tuple(dict(e) for e in lineage),
                rule_key=rule_key,
                seq=self._seq,
            )
            self._seq += 1
            self._entries[fp] = entry
            evicted = self._evict_locked(self._policy, exclude=set())
            still_over = self.live_bytes() > self._capacity(self._policy)
            if fp not in self._entries or still_over:
                if fp in self._entries:
                    self._delete_entry(fp)
                self._write_index()
                raise CapacityError(
                    f"payload of {len(payload)} bytes not retained within capacity "
                    f"{self._capacity(self._policy)} (evicted {len(evicted)} entries)"
                )
            self._write_index()
            return entry

    def get_intermediate(
        self, fingerprint: ProvenanceFingerprint | str
    ) -> tuple[bytes, IntermediateDataset] | None:
        """Payload and metadata for a fingerprint, or None on cache miss.

        Each observed load updates the entry's rolling load-time estimate.
        """
        fp = self._fp_str(fingerprint)
        with self._lock:
            entry = self._entries.get(fp)
            if entry is None:
                self._misses += 1
                return None
        with self.pin(fp):
            t0 = self._timer()
            if self._load_latency_ms:
                time.sleep(self._load_latency_ms / 1000.0)
            with open(entry.payload_uri, "rb") as fh:
                payload = fh.read()
            load_ms = max(0.0, (self._timer() - t0) * 1000.0)
            if hashlib.sha256(payload).hexdigest() != entry.payload_digest:
                raise CorruptPayloadError(f"payload digest mismatch for {fp}")
            with self._lock:
                entry = self._entries.get(fp, entry)
                if entry.load_ema_ms is None:
                    ema = load_ms
                else:
                    ema = 0.5 * load_ms + 0.5 * entry.load_ema_ms
                entry = replace(entry, load_ema_ms=ema)
                if fp in self._entries:
                    self._entries[fp] = entry
                    self._write_index()
                self._hits += 1
            return payload, entry

    def _capacity(self, policy: EvictionPolicy | None) -> int:
        if policy is not None and policy.capacity_bytes is not None:
            return policy.capacity_bytes
        return self.capacity_bytes

    def _delete_entry(self, fp: str) -> None:
        entry = self._entries.pop(fp)
        try:
            os.unlink(entry.payload_uri)
        except FileNotFoundError:
            pass

    def _evict_locked(self, policy: EvictionPolicy, exclude: set[str]) -> list[str]:
        capacity = self._capacity(policy)
        total = self.live_bytes()
        if total <= capacity:
            return []
        benefit = policy.benefit or (lambda entry: 0.0)
        candidates = [
            (fp, e)
            for fp, e in self._entries.items()
            if fp not in exclude and fp not in self._pins
        ]
        candidates.sort(key=lambda item: (benefit(item[1]), item[1].seq))
        evicted: list[str] = []
        for fp, entry in candidates:
            if total <= capacity:
                break
            self._delete_entry(fp)
            total -= entry.size_bytes
            evicted.append(entry.sid)
        return evicted

    def evict(self, policy: EvictionPolicy | None = None) -> list[str]:
        """Run one eviction pass; returns sids of evicted entries."""
        with self._lock:
            evicted = self._evict_locked(policy or self._policy, exclude=set())
            if evicted:
                self._write_index()
            return evicted

    def set_policy(self, policy: EvictionPolicy) -> None:
        with self._lock:
            self._policy = policy

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(
                entries=len(self._entries),
                live_bytes=self.live_bytes(),
                capacity_bytes=self.capacity_bytes,
                hits=self._hits,
                misses=self._misses,
                records=len(self._records),
            )
