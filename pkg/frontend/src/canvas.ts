/** SVG canvas: node boxes with status badges and time labels, port
 * circles, dataflow edges, green-prefix and run-state coloring. The
 * canvas renders whatever state it is handed; interaction intents are
 * surfaced through callbacks and never mutate state locally. */

import {
  badgeClass,
  greenEdges,
  greenNodes,
  runColorClass,
} from "./state.js";
import type {
  ModuleDoc,
  NodeStatus,
  RunState,
  SessionDoc,
  WorkflowDoc,
} from "./types.js";

export interface Point {
  x: number;
  y: number;
}

export interface CanvasCallbacks {
  onNodeDoubleClick(nodeId: string): void;
  onNodeDelete(nodeId: string): void;
  onOutputPortClick(nodeId: string, port: string): void;
  onInputPortClick(nodeId: string, port: string): void;
  onNodeMoved(nodeId: string, position: Point): void;
  onCanvasDrop(moduleId: string, position: Point): void;
}

const NODE_WIDTH = 150;
const NODE_HEIGHT = 58;
const SVG_NS = "http://www.w3.org/2000/svg";

export class CanvasView {
  private positions = new Map<string, Point>();
  private modulesById = new Map<string, ModuleDoc>();
  private pendingFrom: { nodeId: string; port: string } | null = null;
  private dragging: { nodeId: string; dx: number; dy: number } | null = null;

  constructor(
    private svg: SVGSVGElement,
    private callbacks: CanvasCallbacks,
  ) {
    svg.addEventListener("dragover", (event) => event.preventDefault());
    svg.addEventListener("drop", (event) => {
      event.preventDefault();
      const moduleId = event.dataTransfer?.getData("text/flowcache-module");
      if (moduleId) {
        this.callbacks.onCanvasDrop(moduleId, this.eventPoint(event));
      }
    });
    svg.addEventListener("mousemove", (event) => {
      if (this.dragging) {
        const point = this.eventPoint(event);
        this.positions.set(this.dragging.nodeId, {
          x: point.x - this.dragging.dx,
          y: point.y - this.dragging.dy,
        });
        this.callbacks.onNodeMoved(this.dragging.nodeId, this.positions.get(this.dragging.nodeId)!);
      }
    });
    svg.addEventListener("mouseup", () => {
      this.dragging = null;
    });
  }

  setModules(modules: ModuleDoc[]): void {
    this.modulesById = new Map(modules.map((m) => [m.id, m]));
  }

  get pendingConnection(): { nodeId: string; port: string } | null {
    return this.pendingFrom;
  }

  beginConnection(nodeId: string, port: string): void {
    this.pendingFrom = { nodeId, port };
  }

  clearConnection(): void {
    this.pendingFrom = null;
  }

  positionOf(nodeId: string): Point {
    let position = this.positions.get(nodeId);
    if (!position) {
      position = { x: 40 + this.positions.size * 190, y: 60 };
      this.positions.set(nodeId, position);
    }
    return position;
  }

  place(nodeId: string, position: Point): void {
    this.positions.set(nodeId, position);
  }

  forget(nodeId: string): void {
    this.positions.delete(nodeId);
  }

  private eventPoint(event: MouseEvent): Point {
    const rect = this.svg.getBoundingClientRect();
    return { x: event.clientX - rect.x, y: event.clientY - rect.y };
  }

  render(
    session: SessionDoc,
    runStates: Record<string, RunState> | null,
    estimates: Record<string, number | null>,
  ): void {
    const workflow = session.workflow;
    this.svg.replaceChildren();
    const green = greenNodes(workflow, session.selected);
    const greenEdgeSet = new Set(
      greenEdges(workflow, green).map((e) => `${e.from}:${e.from_port}->${e.to}:${e.to_port}`),
    );

    for (const edge of workflow.edges) {
      const fromPos = this.portAnchor(edge.from, edge.from_port, "out");
      const toPos = this.portAnchor(edge.to, edge.to_port, "in");
      const path = document.createElementNS(SVG_NS, "path");
      const mid = (fromPos.x + toPos.x) / 2;
      path.setAttribute(
        "d",
        `M ${fromPos.x} ${fromPos.y} C ${mid} ${fromPos.y}, ${mid} ${toPos.y}, ${toPos.x} ${toPos.y}`,
      );
      path.classList.add("edge");
      if (greenEdgeSet.has(`${edge.from}:${edge.from_port}->${edge.to}:${edge.to_port}`)) {
        path.classList.add("edge-green");
      }
      path.addEventListener("dblclick", () =>
        this.callbacks.onNodeDelete(`edge:${edge.from}:${edge.from_port}:${edge.to}:${edge.to_port}`),
      );
      this.svg.appendChild(path);
    }

    for (const node of workflow.nodes) {
      this.renderNode(
        node.node_id,
        node.module_id,
        session.statuses[node.node_id] ?? "NotChecked",
        green.has(node.node_id),
        runStates?.[node.node_id] ?? null,
        estimates[node.node_id] ?? null,
        session.selected[node.node_id] !== undefined,
      );
    }
  }

  private portAnchor(nodeId: string, port: string, side: "in" | "out"): Point {
    const position = this.positionOf(nodeId);
    const module = this.moduleOfNode(nodeId);
    const ports = side === "in" ? module?.input_ports : module?.output_ports;
    const index = Math.max(0, ports?.findIndex((p) => p.name === port) ?? 0);
    const count = Math.max(1, ports?.length ?? 1);
    const y = position.y + ((index + 1) * NODE_HEIGHT) / (count + 1);
    return { x: side === "in" ? position.x : position.x + NODE_WIDTH, y };
  }

  private moduleOfNode(nodeId: string): ModuleDoc | undefined {
    const entry = this.lastWorkflow?.nodes.find((n) => n.node_id === nodeId);
    return entry ? this.modulesById.get(entry.module_id) : undefined;
  }

  private lastWorkflow: WorkflowDoc | null = null;

  setWorkflow(workflow: WorkflowDoc): void {
    this.lastWorkflow = workflow;
    const liveIds = new Set(workflow.nodes.map((n) => n.node_id));
    for (const id of [...this.positions.keys()]) {
      if (!liveIds.has(id)) {
        this.positions.delete(id);
      }
    }
  }

  private renderNode(
    nodeId: string,
    moduleId: string,
    status: NodeStatus,
    isGreen: boolean,
    runState: RunState | null,
    estimateMs: number | null,
    hasSelection: boolean,
  ): void {
    const position = this.positionOf(nodeId);
    const group = document.createElementNS(SVG_NS, "g");
    group.setAttribute("transform", `translate(${position.x}, ${position.y})`);
    group.dataset.nodeId = nodeId;

    const box = document.createElementNS(SVG_NS, "rect");
    box.setAttribute("width", String(NODE_WIDTH));
    box.setAttribute("height", String(NODE_HEIGHT));
    box.setAttribute("rx", "6");
    box.classList.add("node");
    if (isGreen) {
      box.classList.add("node-green");
    }
    if (runState) {
      box.classList.add(runColorClass(runState));
    }
    box.addEventListener("dblclick", () => this.callbacks.onNodeDoubleClick(nodeId));
    box.addEventListener("mousedown", (event) => {
      const point = this.eventPoint(event);
      this.dragging = { nodeId, dx: point.x - position.x, dy: point.y - position.y };
    });
    group.appendChild(box);

    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", "8");
    label.setAttribute("y", "18");
    label.classList.add("node-label");
    label.textContent = `${nodeId} · ${moduleId}`;
    group.appendChild(label);

    const badge = document.createElementNS(SVG_NS, "text");
    badge.setAttribute("x", "8");
    badge.setAttribute("y", "36");
    badge.classList.add("node-badge", badgeClass(status));
    badge.dataset.role = "badge";
    badge.textContent = hasSelection ? `${status} ✓ load selected` : status;
    group.appendChild(badge);

    const eta = document.createElementNS(SVG_NS, "text");
    eta.setAttribute("x", "8");
    eta.setAttribute("y", "51");
    eta.classList.add("node-eta");
    eta.textContent = estimateMs === null ? "ET: —" : `ET: ${estimateMs} ms`;
    group.appendChild(eta);

    const module = this.modulesById.get(moduleId);
    for (const [index, port] of (module?.input_ports ?? []).entries()) {
      const count = Math.max(1, module?.input_ports.length ?? 1);
      group.appendChild(
        this.portCircle(0, ((index + 1) * NODE_HEIGHT) / (count + 1), port.name, () =>
          this.callbacks.onInputPortClick(nodeId, port.name),
        ),
      );
    }
    for (const [index, port] of (module?.output_ports ?? []).entries()) {
      const count = Math.max(1, module?.output_ports.length ?? 1);
      group.appendChild(
        this.portCircle(NODE_WIDTH, ((index + 1) * NODE_HEIGHT) / (count + 1), port.name, () =>
          this.callbacks.onOutputPortClick(nodeId, port.name),
        ),
      );
    }
    this.svg.appendChild(group);
  }

  private portCircle(x: number, y: number, name: string, onClick: () => void): SVGCircleElement {
    const circle = document.createElementNS(SVG_NS, "circle");
    circle.setAttribute("cx", String(x));
    circle.setAttribute("cy", String(y));
    circle.setAttribute("r", "6");
    circle.classList.add("port");
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent = name;
    circle.appendChild(title);
    circle.addEventListener("click", (event) => {
      event.stopPropagation();
      onClick();
    });
    return circle;
  }
}
