import { ApiError, RsuClient, parseCounts } from "./api.js";
import {
  applyCounts,
  applyStatus,
  ConsoleState,
  initialState,
  pushWarning,
  setDisconnected,
  setError,
  setSource,
} from "./state.js";

export interface ConsoleOptions {
  /** Status poll interval; polling always runs as the fallback transport. */
  pollMs?: number;
  /** Subscribe to the server event stream when EventSource is available. */
  useSse?: boolean;
}

export interface ConsoleController {
  getState(): ConsoleState;
  refresh(): Promise<void>;
  dispose(): void;
}

const SHELL = `
  <div id="banner" class="banner" hidden>RSU unreachable — controls disabled</div>
  <div id="toast" class="toast" hidden></div>
  <header>
    <h1>Roadwatch RSU Console</h1>
    <span id="indicator" class="indicator green" title="large-anomaly indicator"></span>
  </header>
  <section class="controls">
    <button id="btn-mode-1">Mode 1</button>
    <button id="btn-mode-2">Mode 2</button>
    <button id="btn-run">Run Object Detection</button>
    <button id="btn-stop">Stop Detection</button>
    <label>Frame skip <input id="skip-input" type="number" min="0" step="1" /></label>
    <button id="btn-skip">Apply skip</button>
    <button id="btn-reset">Reset</button>
    <label>Select Video/Scenario <input id="source-input" type="text" placeholder="path or URL" /></label>
    <button id="btn-source">Select</button>
  </section>
  <section class="stats">
    <div>Total <strong id="total">0</strong></div>
    <div>Mode <strong id="mode">1</strong></div>
    <div>Running <strong id="running">no</strong></div>
    <div>Skip <strong id="skip">–</strong></div>
    <div>Dropped frames <strong id="dropped">0</strong></div>
    <div id="source" class="muted"></div>
  </section>
  <ul id="counters"></ul>
  <img id="frame" alt="latest annotated frame" hidden />
  <ul id="feed"></ul>
`;

export function createConsole(
  root: HTMLElement,
  client: RsuClient,
  opts: ConsoleOptions = {},
): ConsoleController {
  const pollMs = opts.pollMs ?? 2000;
  const useSse = opts.useSse ?? true;
  let state = initialState();
  let disposed = false;

  root.innerHTML = SHELL;
  const el = <T extends HTMLElement>(id: string): T => {
    const found = root.querySelector<T>(`#${id}`);
    if (!found) throw new Error(`console shell is missing #${id}`);
    return found;
  };

  const banner = el<HTMLElement>("banner");
  const toast = el<HTMLElement>("toast");
  const indicator = el<HTMLElement>("indicator");
  const frame = el<HTMLImageElement>("frame");
  const counters = el<HTMLUListElement>("counters");
  const feed = el<HTMLUListElement>("feed");
  const skipInput = el<HTMLInputElement>("skip-input");
  const sourceInput = el<HTMLInputElement>("source-input");

  let renderedFrameVersion = -1;

  function render(): void {
    banner.hidden = state.connected;
    for (const button of root.querySelectorAll("button")) {
      button.disabled = !state.connected;
    }
    toast.hidden = state.lastError === null || !state.connected;
    toast.textContent = state.lastError ?? "";

    indicator.className = `indicator ${state.latestLarge ? "red" : "green"}`;
    el("total").textContent = String(state.total);
    el("mode").textContent = String(state.mode);
    el("running").textContent = state.running ? "yes" : "no";
    el("skip").textContent = state.skip === null ? "–" : String(state.skip);
    el("dropped").textContent = String(state.droppedFrames);
    el("source").textContent = state.source ? `source: ${state.source}` : "";

    counters.innerHTML = "";
    for (const [cls, n] of Object.entries(state.counts).sort()) {
      const li = root.ownerDocument.createElement("li");
      li.dataset.class = cls;
      li.textContent = `${cls}: ${n}`;
      counters.appendChild(li);
    }

    feed.innerHTML = "";
    for (const entry of state.warnings) {
      const li = root.ownerDocument.createElement("li");
      li.dataset.kind = entry.kind;
      li.textContent = entry.text;
      feed.appendChild(li);
    }

    if (state.frameVersion !== renderedFrameVersion && state.total > 0) {
      renderedFrameVersion = state.frameVersion;
      frame.hidden = false;
      frame.src = client.frameUrl(state.frameVersion);
    }
  }

  function update(next: ConsoleState): void {
    if (disposed) return;
    state = next;
    render();
  }

  async function refresh(): Promise<void> {
    try {
      update(applyStatus(state, await client.getStatus()));
    } catch (err) {
      update(setDisconnected(state, err instanceof Error ? err.message : String(err)));
    }
  }

  /** Run a control POST; on rejection surface the error inline and re-sync from the server. */
  async function control(action: () => Promise<unknown>): Promise<void> {
    try {
      await action();
      await refresh();
    } catch (err) {
      if (err instanceof ApiError) {
        await refresh(); // revert any optimistic change to the server's view
        update(setError(state, `${err.status}: ${err.message}`));
      } else {
        update(setDisconnected(state, err instanceof Error ? err.message : String(err)));
      }
    }
  }

  el("btn-run").addEventListener("click", () => void control(() => client.start()));
  el("btn-stop").addEventListener("click", () => void control(() => client.stop()));
  el("btn-mode-1").addEventListener("click", () => void control(() => client.setMode(1)));
  el("btn-mode-2").addEventListener("click", () => void control(() => client.setMode(2)));
  el("btn-reset").addEventListener("click", () => void control(() => client.reset()));
  el("btn-skip").addEventListener("click", () => {
    const frames = Number.parseInt(skipInput.value, 10);
    if (Number.isNaN(frames)) {
      update(setError(state, "frame skip must be a whole number"));
      return;
    }
    void control(() => client.setSkip(frames));
  });
  el("btn-source").addEventListener("click", () => {
    update(setSource(state, sourceInput.value));
  });

  let eventSource: EventSource | null = null;
  if (useSse && typeof EventSource !== "undefined") {
    eventSource = new EventSource(client.eventsUrl());
    eventSource.addEventListener("counts", (event) => {
      try {
        update(applyCounts(state, parseCounts(JSON.parse((event as MessageEvent).data))));
      } catch {
        /* malformed event payloads are ignored; polling corrects the view */
      }
    });
    const onWarning = (kind: "anomaly" | "general") => (event: Event) => {
      try {
        const data = JSON.parse((event as MessageEvent).data);
        update(pushWarning(state, { text: String(data.text), timestampMs: Date.now(), kind }));
      } catch {
        /* ignore */
      }
    };
    eventSource.addEventListener("warning", onWarning("anomaly"));
    eventSource.addEventListener("general_warning", onWarning("general"));
  }

  const poll = setInterval(() => void refresh(), pollMs);
  void refresh();

  return {
    getState: () => state,
    refresh,
    dispose(): void {
      disposed = true;
      clearInterval(poll);
      eventSource?.close();
    },
  };
}
