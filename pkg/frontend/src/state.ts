/** Pure view-model logic: badge machine, green-prefix derivation, run
 * coloring. Everything here is a function of server responses plus the
 * optimistic resets applied while a mutation is in flight, so a full
 * page reload reconstructs the same view from GET endpoints. */

import type {
  EdgeDoc,
  NodeStatus,
  RecordDoc,
  RunState,
  RunSummaryDoc,
  SessionDoc,
  SuggestionDoc,
  WorkflowDoc,
} from "./types.js";

export function descendants(edges: EdgeDoc[], nodeId: string): Set<string> {
  const out = new Map<string, string[]>();
  for (const e of edges) {
    const list = out.get(e.from) ?? [];
    list.push(e.to);
    out.set(e.from, list);
  }
  const seen = new Set<string>([nodeId]);
  const frontier = [nodeId];
  while (frontier.length) {
    const current = frontier.pop()!;
    for (const next of out.get(current) ?? []) {
      if (!seen.has(next)) {
        seen.add(next);
        frontier.push(next);
      }
    }
  }
  return seen;
}

export function upstream(edges: EdgeDoc[], nodeId: string): Set<string> {
  const inv = edges.map((e) => ({ from: e.to, to: e.from, from_port: "", to_port: "" }));
  return descendants(inv, nodeId);
}

/** Optimistic badge reset: the edited node and everything downstream go
 * back to NotChecked the moment an edit is issued; the server response
 * is authoritative and re-applied afterwards. */
export function resetOnEdit(
  statuses: Record<string, NodeStatus>,
  workflow: WorkflowDoc,
  editedNode: string,
): Record<string, NodeStatus> {
  const affected = descendants(workflow.edges, editedNode);
  const next: Record<string, NodeStatus> = { ...statuses };
  for (const node of affected) {
    next[node] = "NotChecked";
  }
  return next;
}

export function applyCheckResults(
  statuses: Record<string, NodeStatus>,
  results: Record<string, { status: NodeStatus }>,
): Record<string, NodeStatus> {
  const next: Record<string, NodeStatus> = { ...statuses };
  for (const [node, result] of Object.entries(results)) {
    next[node] = result.status;
  }
  return next;
}

/** Nodes rendered green after load selections: the upstream closure of
 * every node with a selected intermediate. */
export function greenNodes(workflow: WorkflowDoc, selected: Record<string, string>): Set<string> {
  const green = new Set<string>();
  for (const nodeId of Object.keys(selected)) {
    for (const member of upstream(workflow.edges, nodeId)) {
      green.add(member);
    }
  }
  return green;
}

/** Edges rendered green: both endpoints inside the green set. */
export function greenEdges(workflow: WorkflowDoc, green: Set<string>): EdgeDoc[] {
  return workflow.edges.filter((e) => green.has(e.from) && green.has(e.to));
}

const RUN_ORDER: Record<RunState, number> = {
  pending: 0,
  running: 1,
  executed: 2,
  "skipped-loaded": 2,
  failed: 2,
  cancelled: 2,
};

export function isTerminal(state: RunState): boolean {
  return RUN_ORDER[state] === 2;
}

/** Merge a freshly polled state map, refusing regressions: a node that
 * reached a terminal state stays there even if a stale poll arrives out
 * of order. */
export function advanceStates(
  previous: Record<string, RunState>,
  next: Record<string, RunState>,
): Record<string, RunState> {
  const merged: Record<string, RunState> = { ...previous };
  for (const [node, state] of Object.entries(next)) {
    const prior = merged[node];
    if (prior === undefined || RUN_ORDER[state] >= RUN_ORDER[prior]) {
      merged[node] = state;
    }
  }
  return merged;
}

export function runColorClass(state: RunState): string {
  switch (state) {
    case "pending":
      return "node-pending";
    case "running":
      return "node-running";
    case "executed":
      return "node-executed";
    case "skipped-loaded":
      return "node-loaded";
    case "failed":
      return "node-failed";
    case "cancelled":
      return "node-cancelled";
  }
}

export function badgeClass(status: NodeStatus): string {
  switch (status) {
    case "NotChecked":
      return "badge-unchecked";
    case "CheckedNotFound":
      return "badge-notfound";
    case "CheckedFound":
      return "badge-found";
    case "LoadData":
      return "badge-load";
  }
}

export function suggestionLabel(s: SuggestionDoc): string {
  const et = s.est_exec_time_ms === null ? "ET ?" : `ET ${s.est_exec_time_ms}ms`;
  const warning = s.load_warning ? " ⚠ load slower than exec" : "";
  return `PM ${s.param_match_pct}% · ${et} · load ${s.load_time_ms}ms${warning}`;
}

export interface SummaryRow {
  label: string;
  value: string;
}

/** Final timing summary table derived from the run record. */
export function summaryRows(record: RecordDoc, summary: RunSummaryDoc): SummaryRow[] {
  const executed = record.node_events.filter((e) => e.outcome === "executed").length;
  const skipped = record.node_events.filter((e) => e.outcome === "skipped-loaded").length;
  const failed = record.node_events.filter((e) => e.outcome === "failed").length;
  const rows: SummaryRow[] = [
    { label: "total", value: `${summary.total_ms} ms` },
    { label: "executed modules", value: `${executed} (${summary.exec_ms} ms)` },
    { label: "loaded modules", value: `${skipped} (${summary.load_ms} ms)` },
  ];
  if (failed > 0) {
    rows.push({ label: "failed modules", value: String(failed) });
  }
  if (summary.time_saved_ms !== null) {
    rows.push({ label: "time saved", value: `${summary.time_saved_ms} ms` });
  }
  return rows;
}

/** Per-node execution-time sums from the record, for per-node labels. */
export function perNodeTimes(record: RecordDoc): Record<string, number> {
  const times: Record<string, number> = {};
  for (const e of record.node_events) {
    times[e.node_id] = e.outcome === "skipped-loaded" ? (e.load_time_ms ?? 0) : e.exec_time_ms;
  }
  return times;
}

export function canExecute(session: SessionDoc): boolean {
  return session.violations.length === 0 && session.executing_run === null;
}

/** The toolbox only offers registered modules; anything else is blocked
 * before a request is made. */
export function isKnownModule(moduleIds: Set<string>, moduleId: string): boolean {
  return moduleIds.has(moduleId);
}
