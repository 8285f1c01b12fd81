/** Wire types mirroring the workflow service's JSON bodies. */

export type NodeStatus =
  | "NotChecked"
  | "CheckedNotFound"
  | "CheckedFound"
  | "LoadData";

export type RunState =
  | "pending"
  | "running"
  | "executed"
  | "skipped-loaded"
  | "failed"
  | "cancelled";

export interface NodeDoc {
  node_id: string;
  module_id: string;
  params: Record<string, unknown>;
}

export interface EdgeDoc {
  from: string;
  from_port: string;
  to: string;
  to_port: string;
}

export interface InputDoc {
  node_id: string;
  port: string;
  dataset_id: string;
}

export interface OutputDoc {
  node_id: string;
  port: string;
}

export interface WorkflowDoc {
  workflow_id: string;
  nodes: NodeDoc[];
  edges: EdgeDoc[];
  inputs: InputDoc[];
  outputs: OutputDoc[];
}

export interface ViolationDoc {
  kind: string;
  nodes: string[];
  message: string;
}

export interface SuggestionDoc {
  target_node: string;
  sid: string;
  fingerprint: string;
  param_match_pct: number;
  est_exec_time_ms: number | null;
  est_fallback: boolean;
  load_time_ms: number;
  time_saved_ms: number | null;
  load_warning: boolean;
  rule_confidence: [number, number] | null;
  created_at: number;
  differing_params: [string, string, unknown, unknown][];
}

export interface SessionDoc {
  session_id: string;
  workflow: WorkflowDoc;
  statuses: Record<string, NodeStatus>;
  suggestions: Record<string, SuggestionDoc[]>;
  selected: Record<string, string>;
  executing_run: string | null;
  violations: ViolationDoc[];
}

export interface PortDoc {
  name: string;
  format: string;
}

export interface ParamSpecDoc {
  name: string;
  kind: "int" | "float" | "string" | "bool" | "enum";
  default: unknown;
  choices: string[];
  affects_output: boolean;
}

export interface ModuleDoc {
  id: string;
  input_ports: PortDoc[];
  output_ports: PortDoc[];
  params: ParamSpecDoc[];
  executor: Record<string, unknown>;
  source_ref: string;
}

export interface DatasetDoc {
  dataset_id: string;
  format: string;
  uri: string;
}

export interface NodeEventDoc {
  node_id: string;
  module_id: string;
  state_digest: string;
  outcome: "executed" | "skipped-loaded" | "failed";
  exec_time_ms: number;
  load_time_ms: number | null;
  inputs: Record<string, string>;
  outputs: Record<string, string>;
  started_at: number;
  finished_at: number;
}

export interface RecordDoc {
  run_id: string;
  workflow_id: string;
  started_at: number;
  finished_at: number;
  node_events: NodeEventDoc[];
  input_datasets: string[];
}

export interface RunSummaryDoc {
  total_ms: number;
  exec_ms: number;
  load_ms: number;
  est_skipped_ms: number | null;
  time_saved_ms: number | null;
}

export interface RunDoc {
  run_id: string;
  done: boolean;
  states: Record<string, RunState>;
  record?: RecordDoc;
  summary?: RunSummaryDoc;
  failed?: boolean;
  error?: string;
}
