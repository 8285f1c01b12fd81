/** Composition app: toolbox and dataset panels, canvas, suggestion
 * panel, and run monitor, all wired through the session API. The UI is
 * a projection of server responses plus optimistic NotChecked resets;
 * any server rejection rolls back by re-fetching the session. */

import { ApiClient, ApiError } from "./api.js";
import { CanvasView, Point } from "./canvas.js";
import { RunMonitor } from "./monitor.js";
import {
  canExecute,
  isKnownModule,
  perNodeTimes,
  resetOnEdit,
  suggestionLabel,
  summaryRows,
} from "./state.js";
import type {
  DatasetDoc,
  ModuleDoc,
  RunState,
  SessionDoc,
  SuggestionDoc,
} from "./types.js";

export class App {
  private api: ApiClient;
  private canvas!: CanvasView;
  private monitor: RunMonitor;
  private session: SessionDoc | null = null;
  private modules: ModuleDoc[] = [];
  private datasets: DatasetDoc[] = [];
  private runStates: Record<string, RunState> | null = null;
  private estimates: Record<string, number | null> = {};
  private mutationInFlight = false;

  constructor(
    private root: HTMLElement,
    baseUrl = "",
  ) {
    this.api = new ApiClient(baseUrl);
    this.monitor = new RunMonitor(this.api);
  }

  async start(): Promise<void> {
    this.root.innerHTML = `
      <div class="layout">
        <aside class="panel" id="toolbox">
          <h2>Modules</h2>
          <ul id="module-list"></ul>
          <h2>Datasets</h2>
          <ul id="dataset-list"></ul>
        </aside>
        <main class="center">
          <div class="toolbar">
            <button id="btn-search">Search</button>
            <button id="btn-execute">Execute</button>
            <span id="status-line"></span>
          </div>
          <svg id="canvas" width="1200" height="560"></svg>
          <div id="violations"></div>
          <div id="summary"></div>
        </main>
        <aside class="panel" id="suggestions">
          <h2>Suggestions</h2>
          <div id="suggestion-list"></div>
        </aside>
      </div>
      <div id="toast"></div>
      <dialog id="dialog"></dialog>
    `;
    const svg = this.root.querySelector<SVGSVGElement>("#canvas")!;
    this.canvas = new CanvasView(svg, {
      onNodeDoubleClick: (nodeId) => void this.openParamDialog(nodeId),
      onNodeDelete: (target) => void this.deleteTarget(target),
      onOutputPortClick: (nodeId, port) => this.canvas.beginConnection(nodeId, port),
      onInputPortClick: (nodeId, port) => void this.finishConnection(nodeId, port),
      onNodeMoved: () => this.renderCanvas(),
      onCanvasDrop: (moduleId, position) => void this.dropModule(moduleId, position),
    });

    [this.modules, this.datasets] = await Promise.all([
      this.api.modules(),
      this.api.datasets(),
    ]);
    this.canvas.setModules(this.modules);
    this.renderToolbox();

    const existing = new URLSearchParams(location.search).get("session");
    if (existing) {
      this.session = await this.api.getSession(existing);
    } else {
      const created = await this.api.createSession();
      this.session = await this.api.getSession(created.session_id);
      history.replaceState(null, "", `?session=${created.session_id}`);
    }

    this.root.querySelector("#btn-search")!.addEventListener("click", () => void this.search());
    this.root.querySelector("#btn-execute")!.addEventListener("click", () => void this.execute());
    this.renderAll();
  }

  // -- rendering -------------------------------------------------------------

  private renderToolbox(): void {
    const moduleList = this.root.querySelector("#module-list")!;
    moduleList.replaceChildren(
      ...this.modules.map((m) => {
        const item = document.createElement("li");
        item.textContent = m.id;
        item.draggable = true;
        item.addEventListener("dragstart", (event) => {
          event.dataTransfer?.setData("text/flowcache-module", m.id);
        });
        item.addEventListener("dblclick", () => void this.dropModule(m.id, { x: 60, y: 60 }));
        return item;
      }),
    );
    const datasetList = this.root.querySelector("#dataset-list")!;
    datasetList.replaceChildren(
      ...this.datasets.map((d) => {
        const item = document.createElement("li");
        item.textContent = `${d.dataset_id} (${d.format})`;
        return item;
      }),
    );
  }

  private renderAll(): void {
    if (!this.session) return;
    this.canvas.setWorkflow(this.session.workflow);
    this.renderCanvas();
    this.renderViolations();
    this.renderSuggestions();
    const executeButton = this.root.querySelector<HTMLButtonElement>("#btn-execute")!;
    executeButton.disabled = !canExecute(this.session) || this.mutationInFlight;
  }

  private renderCanvas(): void {
    if (!this.session) return;
    this.canvas.render(this.session, this.runStates, this.estimates);
  }

  private renderViolations(): void {
    const box = this.root.querySelector("#violations")!;
    const violations = this.session?.violations ?? [];
    box.replaceChildren(
      ...violations.map((v) => {
        const line = document.createElement("div");
        line.className = "violation";
        line.textContent = `${v.kind}: ${v.message}`;
        return line;
      }),
    );
  }

  private renderSuggestions(): void {
    if (!this.session) return;
    const container = this.root.querySelector("#suggestion-list")!;
    container.replaceChildren();
    for (const [nodeId, suggestions] of Object.entries(this.session.suggestions)) {
      if (!suggestions.length) continue;
      const heading = document.createElement("h3");
      heading.textContent = nodeId;
      container.appendChild(heading);
      for (const suggestion of suggestions) {
        const row = document.createElement("button");
        row.className = "suggestion";
        if (suggestion.load_warning) row.classList.add("suggestion-warning");
        if (this.session.selected[nodeId] === suggestion.sid) {
          row.classList.add("suggestion-selected");
        }
        row.textContent = suggestionLabel(suggestion);
        row.addEventListener("click", () => void this.pickSuggestion(nodeId, suggestion));
        container.appendChild(row);
      }
    }
  }

  private toast(message: string): void {
    const toast = this.root.querySelector<HTMLElement>("#toast")!;
    toast.textContent = message;
    toast.classList.add("visible");
    setTimeout(() => toast.classList.remove("visible"), 4000);
  }

  private statusLine(message: string): void {
    this.root.querySelector("#status-line")!.textContent = message;
  }

  // -- mutations ---------------------------------------------------------------

  /** Run one mutation with an optimistic badge reset; roll back to the
   * server's view on any outcome. One in-flight mutation per session. */
  private async mutate(editedNode: string | null, action: () => Promise<unknown>): Promise<boolean> {
    if (!this.session || this.mutationInFlight) return false;
    this.mutationInFlight = true;
    if (editedNode !== null) {
      this.session.statuses = resetOnEdit(
        this.session.statuses,
        this.session.workflow,
        editedNode,
      );
      this.renderAll();
    }
    let ok = true;
    try {
      await action();
    } catch (error) {
      ok = false;
      this.toast(error instanceof ApiError ? error.detail : String(error));
    } finally {
      this.session = await this.api.getSession(this.session.session_id);
      this.mutationInFlight = false;
      this.renderAll();
    }
    return ok;
  }

  private async dropModule(moduleId: string, position: Point): Promise<void> {
    if (!this.session) return;
    if (!isKnownModule(new Set(this.modules.map((m) => m.id)), moduleId)) {
      this.toast(`unknown module ${moduleId}`);
      return;
    }
    const sessionId = this.session.session_id;
    await this.mutate(null, async () => {
      const result = await this.api.addNode(sessionId, moduleId);
      if (result.node_id) {
        this.canvas.place(result.node_id, position);
      }
    });
  }

  private async finishConnection(toNode: string, toPort: string): Promise<void> {
    const pending = this.canvas.pendingConnection;
    if (!pending || !this.session) return;
    this.canvas.clearConnection();
    const sessionId = this.session.session_id;
    const drawn = await this.mutate(toNode, () =>
      this.api.connect(sessionId, pending.nodeId, pending.port, toNode, toPort),
    );
    if (!drawn) {
      // Offer a dataset binding instead when connecting from nothing.
      return;
    }
  }

  private async deleteTarget(target: string): Promise<void> {
    if (!this.session) return;
    const sessionId = this.session.session_id;
    if (target.startsWith("edge:")) {
      const [, from, fromPort, to, toPort] = target.split(":");
      await this.mutate(to, () => this.api.disconnect(sessionId, from, fromPort, to, toPort));
    } else {
      this.canvas.forget(target);
      await this.mutate(target, () => this.api.removeNode(sessionId, target));
    }
  }

  private async openParamDialog(nodeId: string): Promise<void> {
    if (!this.session) return;
    const node = this.session.workflow.nodes.find((n) => n.node_id === nodeId);
    const module = this.modules.find((m) => m.id === node?.module_id);
    if (!node || !module) return;

    const dialog = this.root.querySelector<HTMLDialogElement>("#dialog")!;
    dialog.innerHTML = `
      <form method="dialog">
        <h3>${nodeId} parameters</h3>
        <div id="param-fields"></div>
        <menu>
          <button value="cancel">Cancel</button>
          <button value="save" id="param-save">Save</button>
        </menu>
      </form>
    `;
    const fields = dialog.querySelector("#param-fields")!;
    for (const spec of module.params) {
      const label = document.createElement("label");
      label.textContent = `${spec.name} (${spec.kind}) `;
      const input = document.createElement("input");
      input.name = spec.name;
      input.value = String(node.params[spec.name] ?? spec.default);
      label.appendChild(input);
      fields.appendChild(label);
    }
    dialog.showModal();
    const result = await new Promise<string>((resolve) => {
      dialog.addEventListener("close", () => resolve(dialog.returnValue), { once: true });
    });
    if (result !== "save") return;

    const params: Record<string, unknown> = {};
    for (const spec of module.params) {
      const raw = dialog.querySelector<HTMLInputElement>(`input[name="${spec.name}"]`)!.value;
      if (spec.kind === "int") params[spec.name] = parseInt(raw, 10);
      else if (spec.kind === "float") params[spec.name] = parseFloat(raw);
      else if (spec.kind === "bool") params[spec.name] = raw === "true";
      else params[spec.name] = raw;
    }
    const sessionId = this.session.session_id;
    await this.mutate(nodeId, () => this.api.setParams(sessionId, nodeId, params));
  }

  // -- check / load / execute ---------------------------------------------------

  private async search(): Promise<void> {
    if (!this.session) return;
    this.statusLine("checking…");
    try {
      await this.api.checkAll(this.session.session_id);
    } catch (error) {
      this.toast(error instanceof ApiError ? error.detail : String(error));
    }
    this.session = await this.api.getSession(this.session.session_id);
    await this.refreshEstimates();
    this.statusLine("");
    this.renderAll();
  }

  private async refreshEstimates(): Promise<void> {
    if (!this.session) return;
    this.estimates = {};
    for (const [nodeId, suggestions] of Object.entries(this.session.suggestions)) {
      this.estimates[nodeId] = suggestions[0]?.est_exec_time_ms ?? null;
    }
  }

  private async pickSuggestion(nodeId: string, suggestion: SuggestionDoc): Promise<void> {
    if (!this.session) return;
    if (suggestion.param_match_pct < 100) {
      const confirmed = await this.confirmPartial(suggestion);
      if (!confirmed) return;
    }
    const sessionId = this.session.session_id;
    try {
      await this.api.selectLoad(sessionId, nodeId, suggestion.sid);
    } catch (error) {
      this.toast(error instanceof ApiError ? error.detail : String(error));
    }
    this.session = await this.api.getSession(sessionId);
    this.renderAll();
  }

  /** Partial matches require informed consent: show exactly which
   * parameter values the candidate was produced with. */
  private confirmPartial(suggestion: SuggestionDoc): Promise<boolean> {
    const dialog = this.root.querySelector<HTMLDialogElement>("#dialog")!;
    const rows = suggestion.differing_params
      .map(
        ([moduleId, param, candidate, composed]) =>
          `<tr><td>${moduleId}.${param}</td><td>${candidate}</td><td>${composed}</td></tr>`,
      )
      .join("");
    dialog.innerHTML = `
      <form method="dialog">
        <h3>Partial match: ${suggestion.param_match_pct}%</h3>
        <p>The stored data was produced with different parameters:</p>
        <table>
          <tr><th>parameter</th><th>stored</th><th>composed</th></tr>
          ${rows}
        </table>
        <menu>
          <button value="cancel">Cancel</button>
          <button value="load">Load anyway</button>
        </menu>
      </form>
    `;
    dialog.showModal();
    return new Promise((resolve) => {
      dialog.addEventListener("close", () => resolve(dialog.returnValue === "load"), {
        once: true,
      });
    });
  }

  private async execute(): Promise<void> {
    if (!this.session) return;
    const sessionId = this.session.session_id;
    let runId: string;
    try {
      ({ run_id: runId } = await this.api.execute(sessionId));
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.toast(`stale suggestion: ${error.detail}`);
      } else {
        this.toast(error instanceof ApiError ? error.detail : String(error));
      }
      this.session = await this.api.getSession(sessionId);
      this.renderAll();
      return;
    }
    this.statusLine(`running ${runId.slice(0, 8)}…`);
    this.runStates = {};
    this.monitor.start(
      runId,
      (states) => {
        this.runStates = states;
        this.renderCanvas();
      },
      (doc) => {
        void (async () => {
          this.session = await this.api.getSession(sessionId);
          this.statusLine(doc.failed ? "run failed" : "run complete");
          const summaryBox = this.root.querySelector("#summary")!;
          if (doc.record && doc.summary) {
            const times = perNodeTimes(doc.record);
            const rows = summaryRows(doc.record, doc.summary)
              .map((r) => `<tr><td>${r.label}</td><td>${r.value}</td></tr>`)
              .join("");
            const perNode = Object.entries(times)
              .map(([n, ms]) => `<tr><td>${n}</td><td>${ms} ms</td></tr>`)
              .join("");
            summaryBox.innerHTML = `<table>${rows}</table><details><summary>per node</summary><table>${perNode}</table></details>`;
          }
          this.renderAll();
        })();
      },
    );
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const app = new App(document.getElementById("app")!);
  void app.start();
}
