import { describe, expect, it } from "vitest";

import {
  advanceStates,
  applyCheckResults,
  badgeClass,
  canExecute,
  descendants,
  greenEdges,
  greenNodes,
  isKnownModule,
  isTerminal,
  perNodeTimes,
  resetOnEdit,
  runColorClass,
  suggestionLabel,
  summaryRows,
  upstream,
} from "../src/state.js";
import type {
  EdgeDoc,
  NodeStatus,
  RecordDoc,
  RunState,
  SessionDoc,
  SuggestionDoc,
  WorkflowDoc,
} from "../src/types.js";

function edge(from: string, to: string): EdgeDoc {
  return { from, from_port: "out0", to, to_port: "in0" };
}

function workflow(edges: EdgeDoc[], nodeIds: string[]): WorkflowDoc {
  return {
    workflow_id: "wf",
    nodes: nodeIds.map((node_id) => ({ node_id, module_id: "m", params: {} })),
    edges,
    inputs: [],
    outputs: [],
  };
}

const CHAIN = workflow([edge("n1", "n2"), edge("n2", "n3")], ["n1", "n2", "n3"]);

describe("graph traversal", () => {
  it("descendants include the node itself and all below", () => {
    expect(descendants(CHAIN.edges, "n2")).toEqual(new Set(["n2", "n3"]));
    expect(descendants(CHAIN.edges, "n1")).toEqual(new Set(["n1", "n2", "n3"]));
  });

  it("upstream includes the node itself and all above", () => {
    expect(upstream(CHAIN.edges, "n2")).toEqual(new Set(["n1", "n2"]));
  });

  it("handles diamonds", () => {
    const edges = [edge("a", "b"), edge("a", "c"), edge("b", "d"), edge("c", "d")];
    expect(upstream(edges, "d")).toEqual(new Set(["a", "b", "c", "d"]));
    expect(descendants(edges, "b")).toEqual(new Set(["b", "d"]));
  });
});

describe("badge state machine", () => {
  const checked: Record<string, NodeStatus> = {
    n1: "CheckedNotFound",
    n2: "LoadData",
    n3: "CheckedFound",
  };

  it("edit resets the edited node and its descendants to NotChecked", () => {
    const next = resetOnEdit(checked, CHAIN, "n2");
    expect(next).toEqual({
      n1: "CheckedNotFound",
      n2: "NotChecked",
      n3: "NotChecked",
    });
  });

  it("editing the root resets everything", () => {
    const next = resetOnEdit(checked, CHAIN, "n1");
    expect(Object.values(next)).toEqual(["NotChecked", "NotChecked", "NotChecked"]);
  });

  it("does not mutate the input", () => {
    resetOnEdit(checked, CHAIN, "n1");
    expect(checked.n2).toBe("LoadData");
  });

  it("check results overwrite statuses", () => {
    const next = applyCheckResults(
      { n1: "NotChecked" },
      { n1: { status: "LoadData" } },
    );
    expect(next.n1).toBe("LoadData");
  });

  it("each status has a distinct badge class", () => {
    const classes = new Set(
      (["NotChecked", "CheckedNotFound", "CheckedFound", "LoadData"] as NodeStatus[]).map(
        badgeClass,
      ),
    );
    expect(classes.size).toBe(4);
  });
});

describe("green prefix", () => {
  it("covers the upstream closure of the selected node", () => {
    const green = greenNodes(CHAIN, { n2: "some-sid" });
    expect(green).toEqual(new Set(["n1", "n2"]));
    const edges = greenEdges(CHAIN, green);
    expect(edges).toHaveLength(1);
    expect(edges[0].from).toBe("n1");
  });

  it("is empty with no selections", () => {
    expect(greenNodes(CHAIN, {})).toEqual(new Set());
  });

  it("unions multiple selections", () => {
    const edges = [edge("a", "b"), edge("a", "c")];
    const wf = workflow(edges, ["a", "b", "c"]);
    expect(greenNodes(wf, { b: "s1", c: "s2" })).toEqual(new Set(["a", "b", "c"]));
  });
});

describe("run state transitions", () => {
  it("advances forward", () => {
    const merged = advanceStates({ n1: "pending" }, { n1: "running" });
    expect(merged.n1).toBe("running");
  });

  it("refuses regressions from terminal states", () => {
    const merged = advanceStates({ n1: "executed" }, { n1: "running" });
    expect(merged.n1).toBe("executed");
  });

  it("identifies terminal states", () => {
    const terminal: RunState[] = ["executed", "skipped-loaded", "failed", "cancelled"];
    for (const state of terminal) expect(isTerminal(state)).toBe(true);
    expect(isTerminal("pending")).toBe(false);
    expect(isTerminal("running")).toBe(false);
  });

  it("skipped nodes never render as running", () => {
    // A loaded node jumps pending -> skipped-loaded; its color class is
    // the loaded green, distinct from the running color.
    expect(runColorClass("skipped-loaded")).toBe("node-loaded");
    expect(runColorClass("running")).toBe("node-running");
    const merged = advanceStates({ n1: "skipped-loaded" }, { n1: "running" });
    expect(merged.n1).toBe("skipped-loaded");
  });
});

describe("suggestion labels", () => {
  const base: SuggestionDoc = {
    target_node: "n2",
    sid: "abc",
    fingerprint: "sha256:0",
    param_match_pct: 75,
    est_exec_time_ms: 200,
    est_fallback: false,
    load_time_ms: 12,
    time_saved_ms: 188,
    load_warning: false,
    rule_confidence: [3, 4],
    created_at: 0,
    differing_params: [["m2", "b", 9, 2]],
  };

  it("shows match percent and estimated time", () => {
    expect(suggestionLabel(base)).toContain("PM 75%");
    expect(suggestionLabel(base)).toContain("ET 200ms");
  });

  it("marks unknown estimates", () => {
    expect(suggestionLabel({ ...base, est_exec_time_ms: null })).toContain("ET ?");
  });

  it("carries the warning marker when loading is slower", () => {
    expect(suggestionLabel({ ...base, load_warning: true })).toContain("load slower");
    expect(suggestionLabel(base)).not.toContain("load slower");
  });
});

describe("run summary", () => {
  const record: RecordDoc = {
    run_id: "r",
    workflow_id: "wf",
    started_at: 0,
    finished_at: 500,
    input_datasets: ["D1"],
    node_events: [
      {
        node_id: "n1", module_id: "m1", state_digest: "s", outcome: "skipped-loaded",
        exec_time_ms: 0, load_time_ms: 7, inputs: {}, outputs: {}, started_at: 0, finished_at: 1,
      },
      {
        node_id: "n2", module_id: "m2", state_digest: "s", outcome: "executed",
        exec_time_ms: 120, load_time_ms: null, inputs: {}, outputs: {}, started_at: 1, finished_at: 121,
      },
    ],
  };

  it("totals match the record", () => {
    const rows = summaryRows(record, {
      total_ms: 130, exec_ms: 120, load_ms: 7, est_skipped_ms: 100, time_saved_ms: 93,
    });
    expect(rows.find((r) => r.label === "total")?.value).toBe("130 ms");
    expect(rows.find((r) => r.label === "executed modules")?.value).toBe("1 (120 ms)");
    expect(rows.find((r) => r.label === "loaded modules")?.value).toBe("1 (7 ms)");
    expect(rows.find((r) => r.label === "time saved")?.value).toBe("93 ms");
  });

  it("per-node times use load time for skipped nodes", () => {
    expect(perNodeTimes(record)).toEqual({ n1: 7, n2: 120 });
  });
});

describe("guards", () => {
  it("execute disabled while a run is in flight or draft invalid", () => {
    const session: SessionDoc = {
      session_id: "s",
      workflow: CHAIN,
      statuses: {},
      suggestions: {},
      selected: {},
      executing_run: null,
      violations: [],
    };
    expect(canExecute(session)).toBe(true);
    expect(canExecute({ ...session, executing_run: "r1" })).toBe(false);
    expect(
      canExecute({
        ...session,
        violations: [{ kind: "unbound-input", nodes: ["n1"], message: "x" }],
      }),
    ).toBe(false);
  });

  it("unknown toolbox modules are blocked client-side", () => {
    const known = new Set(["m1", "m2"]);
    expect(isKnownModule(known, "m1")).toBe(true);
    expect(isKnownModule(known, "mystery")).toBe(false);
  });
});
