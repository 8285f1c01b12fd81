/** Thin typed client for the workflow service endpoints. */

import type {
  DatasetDoc,
  ModuleDoc,
  NodeStatus,
  RunDoc,
  SessionDoc,
  SuggestionDoc,
  ViolationDoc,
  WorkflowDoc,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

interface MutationResult {
  violations: ViolationDoc[];
  node_id?: string;
}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : {},
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await response.text();
    if (!response.ok) {
      let detail = text;
      try {
        detail = JSON.parse(text).detail ?? text;
      } catch {
        /* plain-text error body */
      }
      throw new ApiError(response.status, String(detail));
    }
    const contentType = response.headers.get("content-type") ?? "";
    if (contentType.includes("application/json")) {
      return JSON.parse(text) as T;
    }
    return text as unknown as T;
  }

  createSession(workflow?: WorkflowDoc): Promise<{ session_id: string; violations: ViolationDoc[] }> {
    return this.call("POST", "/sessions", workflow ? { workflow } : {});
  }

  getSession(sessionId: string): Promise<SessionDoc> {
    return this.call("GET", `/sessions/${sessionId}`);
  }

  addNode(
    sessionId: string,
    moduleId: string,
    params: Record<string, unknown> = {},
    nodeId?: string,
  ): Promise<MutationResult> {
    return this.call("POST", `/sessions/${sessionId}/nodes`, {
      node_id: nodeId ?? null,
      module_id: moduleId,
      params,
    });
  }

  removeNode(sessionId: string, nodeId: string): Promise<MutationResult> {
    return this.call("DELETE", `/sessions/${sessionId}/nodes/${nodeId}`);
  }

  setParams(
    sessionId: string,
    nodeId: string,
    params: Record<string, unknown>,
  ): Promise<MutationResult> {
    return this.call("PUT", `/sessions/${sessionId}/nodes/${nodeId}/params`, { params });
  }

  connect(
    sessionId: string,
    from: string,
    fromPort: string,
    to: string,
    toPort: string,
  ): Promise<MutationResult> {
    return this.call("POST", `/sessions/${sessionId}/edges`, {
      from,
      from_port: fromPort,
      to,
      to_port: toPort,
    });
  }

  disconnect(
    sessionId: string,
    from: string,
    fromPort: string,
    to: string,
    toPort: string,
  ): Promise<MutationResult> {
    return this.call("POST", `/sessions/${sessionId}/edges`, {
      from,
      from_port: fromPort,
      to,
      to_port: toPort,
      remove: true,
    });
  }

  bindInput(
    sessionId: string,
    nodeId: string,
    port: string,
    datasetId: string,
  ): Promise<MutationResult> {
    return this.call("POST", `/sessions/${sessionId}/inputs`, {
      node_id: nodeId,
      port,
      dataset_id: datasetId,
    });
  }

  declareOutput(sessionId: string, nodeId: string, port: string): Promise<MutationResult> {
    return this.call("POST", `/sessions/${sessionId}/outputs`, {
      node_id: nodeId,
      port,
    });
  }

  checkNode(
    sessionId: string,
    nodeId: string,
  ): Promise<{ node_id: string; status: NodeStatus; suggestions: SuggestionDoc[] }> {
    return this.call("POST", `/sessions/${sessionId}/check/${nodeId}`);
  }

  checkAll(
    sessionId: string,
  ): Promise<{ nodes: Record<string, { status: NodeStatus; suggestions: SuggestionDoc[] }> }> {
    return this.call("POST", `/sessions/${sessionId}/check`);
  }

  selectLoad(sessionId: string, nodeId: string, sid: string | null): Promise<{ selected: Record<string, string> }> {
    return this.call("POST", `/sessions/${sessionId}/load`, { node_id: nodeId, sid });
  }

  execute(sessionId: string, workers = 1): Promise<{ run_id: string }> {
    return this.call("POST", `/sessions/${sessionId}/execute`, { workers });
  }

  runStatus(runId: string): Promise<RunDoc> {
    return this.call("GET", `/runs/${runId}`);
  }

  modules(): Promise<ModuleDoc[]> {
    return this.call("GET", "/modules");
  }

  datasets(): Promise<DatasetDoc[]> {
    return this.call("GET", "/datasets");
  }

  metrics(): Promise<Record<string, unknown>> {
    return this.call("GET", "/metrics");
  }

  rules(): Promise<string> {
    return this.call("GET", "/rules");
  }
}
