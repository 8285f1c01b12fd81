"""flowcache: a workflow engine that caches and recommends intermediate results.

Pipelines are DAGs of parameterized modules. Every module output is
identified by a provenance fingerprint of its upstream closure; outputs
whose dataset-to-sequence association rules become frequent are stored,
and later compositions that reproduce the same prefix can load them
instead of recomputing.
"""
from .bench import ApdexSample, BenchReport, WorkloadSpec, apdex, bench_compare, gen_workload
from .engine import Engine, ExecutionPlan, RunHandle, StaleSelectionError, plan, run_module, start_run
from .mining import AssociationRule, RuleSet, Thresholds, incremental_update, mine
from .model import (
    DataRegistry,
    DatasetRef,
    Edge,
    ExecutorConfig,
    FlowcacheError,
    ModuleRegistry,
    ModuleSpec,
    ParamSpec,
    Port,
    ProvenanceFingerprint,
    ToolState,
    Violation,
    WorkflowGraph,
    canonical_state,
    enumerate_rule_candidates,
    fingerprint,
    validate_graph,
)
from .recommend import NodeStatus, StoragePlan, Suggestion, check, estimate_time, parameter_match, rank, storage_plan
from .store import (
    EvictionPolicy,
    ExecutionRecord,
    IntermediateDataset,
    NodeEvent,
    Store,
)

__version__ = "0.1.0"
