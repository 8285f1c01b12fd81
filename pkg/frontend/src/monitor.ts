/** Run monitor: polls run status once a second, enforces forward-only
 * node state transitions, and stops at the terminal snapshot. */

import type { ApiClient } from "./api.js";
import { advanceStates } from "./state.js";
import type { RunDoc, RunState } from "./types.js";

export class RunMonitor {
  private timer: ReturnType<typeof setInterval> | null = null;
  private states: Record<string, RunState> = {};

  constructor(
    private api: ApiClient,
    private intervalMs = 1000,
  ) {}

  start(
    runId: string,
    onUpdate: (states: Record<string, RunState>) => void,
    onDone: (doc: RunDoc) => void,
  ): void {
    this.stop();
    this.states = {};
    const poll = async () => {
      let doc: RunDoc;
      try {
        doc = await this.api.runStatus(runId);
      } catch {
        return; // transient poll failure; next tick retries
      }
      this.states = advanceStates(this.states, doc.states);
      onUpdate(this.states);
      if (doc.done) {
        this.stop();
        onDone(doc);
      }
    };
    this.timer = setInterval(poll, this.intervalMs);
    void poll();
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
