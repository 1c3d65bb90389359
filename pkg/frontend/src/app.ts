/** DOM shell for the suggestion review workflow: open a session, walk the
 * queue, inspect rasters, record decisions, download the final report. */

import { ApiClient, DecisionAction, SuggestionRecord } from "./api.js";
import { CHANNEL_LABELS, PreviewLoader, RenderedPreview } from "./preview.js";
import { legalActions, SessionState, SessionStore } from "./state.js";

export interface AppOptions {
  baseUrl: string;
  pollMs?: number;
  fetchImpl?: (url: string, init?: RequestInit) => Promise<Response>;
}

const ACTION_LABELS: Record<DecisionAction, string> = {
  approve: "Approve (a)",
  reject_flatten: "Reject + flatten (f)",
  reject_manual: "Reject, handle manually (m)",
  flatten: "Flatten (f)",
  manual: "Mark manual (m)",
};

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K, className?: string, text?: string): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function fmtProb(p: number | null): string {
  return p === null ? "-" : `${(p * 100).toFixed(1)}%`;
}

function context2d(canvas: HTMLCanvasElement):
    CanvasRenderingContext2D | null {
  try {
    return canvas.getContext("2d");
  } catch {
    return null;   // DOM implementations without canvas raster support
  }
}

export function paintPreview(canvas: HTMLCanvasElement,
                             rendered: RenderedPreview): void {
  canvas.width = rendered.size;
  canvas.height = rendered.size;
  const ctx = context2d(canvas);
  if (!ctx) {
    canvas.dataset["pixels"] = String(rendered.rgba.length / 4);
    return;
  }
  const image = ctx.createImageData(rendered.size, rendered.size);
  image.data.set(rendered.rgba);
  ctx.putImageData(image, 0, 0);
}

export class App {
  private readonly api: ApiClient;
  private store: SessionStore | null = null;
  private previews: PreviewLoader | null = null;
  private selectedId: string | null = null;
  private channelChoice = "overlay";
  private unsubscribe: (() => void) | null = null;

  private readonly queuePane = el("div", "queue-pane");
  private readonly detailPane = el("div", "detail-pane");
  private readonly statsBar = el("div", "stats-bar");
  private readonly errorBar = el("div", "error-bar");

  constructor(private readonly root: HTMLElement,
              private readonly opts: AppOptions) {
    this.api = new ApiClient(opts.baseUrl, opts.fetchImpl);
  }

  mount(): void {
    this.root.replaceChildren(
      this.buildOpenForm(), this.errorBar, this.statsBar,
      this.queuePane, this.detailPane);
    document.addEventListener("keydown", this.onKey);
  }

  unmount(): void {
    document.removeEventListener("keydown", this.onKey);
    this.store?.stop();
    this.unsubscribe?.();
  }

  private buildOpenForm(): HTMLElement {
    const form = el("form", "open-form");
    const gds = el("input");
    gds.name = "gdsii_path";
    gds.placeholder = "layout file path";
    const model = el("input");
    model.name = "model_path";
    model.placeholder = "model checkpoint (optional)";
    const top = el("input");
    top.name = "top";
    top.placeholder = "top cell (optional)";
    const open = el("button", "", "Open session");
    open.type = "submit";
    form.append(gds, model, top, open);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.openSession(gds.value, model.value, top.value);
    });
    return form;
  }

  async openSession(gdsiiPath: string, modelPath: string,
                    top: string): Promise<void> {
    try {
      const info = await this.api.createSession({
        gdsii_path: gdsiiPath,
        ...(modelPath ? { model_path: modelPath } : {}),
        ...(top ? { top } : {}),
      });
      this.attach(info.session_id);
    } catch (e) {
      this.errorBar.textContent = e instanceof Error ? e.message : String(e);
    }
  }

  /** Re-sync with the server immediately instead of waiting for the poll. */
  refresh(): Promise<void> {
    return this.store?.refresh() ?? Promise.resolve();
  }

  /** Bind the UI to an existing session and start polling it. */
  attach(sessionId: string): void {
    this.store?.stop();
    this.unsubscribe?.();
    this.store = new SessionStore(this.api, sessionId);
    this.previews = new PreviewLoader(this.api, sessionId);
    this.selectedId = null;
    this.unsubscribe = this.store.subscribe((s) => this.render(s));
    this.store.start(this.opts.pollMs ?? 1000);
  }

  private onKey = (ev: KeyboardEvent): void => {
    if (ev.target instanceof HTMLInputElement) return;
    const state = this.store?.state();
    if (!state) return;
    if (ev.key === "j" || ev.key === "k") {
      this.moveSelection(state, ev.key === "j" ? 1 : -1);
      return;
    }
    const record = state.records.find((r) => r.id === this.selectedId);
    if (!record) return;
    const actions = legalActions(record);
    const byKey: Record<string, DecisionAction[]> = {
      a: ["approve"],
      f: ["reject_flatten", "flatten"],
      m: ["reject_manual", "manual"],
    };
    for (const action of byKey[ev.key] ?? []) {
      if (actions.includes(action)) {
        this.store?.decide(record.id, action);
        return;
      }
    }
  };

  private moveSelection(state: SessionState, step: number): void {
    if (state.records.length === 0) return;
    const idx = state.records.findIndex((r) => r.id === this.selectedId);
    const next = Math.min(state.records.length - 1, Math.max(0, idx + step));
    this.selectedId = state.records[next]!.id;
    this.render(state);
  }

  private render(state: SessionState): void {
    this.errorBar.textContent = state.error ?? "";
    this.renderStats(state);
    this.renderQueue(state);
    this.renderDetail(state);
  }

  private renderStats(state: SessionState): void {
    this.statsBar.replaceChildren();
    const stats = state.stats;
    if (!stats) return;
    const parts = Object.entries(stats.partition)
      .map(([k, v]) => `${k}: ${v}`).join("  ");
    this.statsBar.append(el("span", "partition", parts));
    const download = el("button", "download", "Download report");
    download.disabled = !stats.complete;
    download.addEventListener("click", () => void this.downloadReport());
    this.statsBar.append(download);
    if (stats.complete) {
      this.statsBar.append(el("span", "complete", "all records resolved"));
    }
  }

  private async downloadReport(): Promise<void> {
    if (!this.store) return;
    try {
      const text = await this.store.report();
      saveTextFile(text, `${this.store.sessionId}-report.json`);
    } catch (e) {
      this.errorBar.textContent = e instanceof Error ? e.message : String(e);
    }
  }

  private renderQueue(state: SessionState): void {
    this.queuePane.replaceChildren();
    for (const record of state.records) {
      const row = el("div", `record status-${record.status}`);
      if (record.id === this.selectedId) row.classList.add("selected");
      row.append(
        el("span", "cell", record.cell_name),
        el("span", "label", record.suggested_label ?? "no match"),
        el("span", "prob", fmtProb(record.probability)),
        el("span", "status",
           record.ng_resolution
             ? `${record.status} (${record.ng_resolution})`
             : record.status),
      );
      row.dataset["id"] = record.id;
      row.addEventListener("click", () => {
        this.selectedId = record.id;
        this.render(this.store!.state());
      });
      this.queuePane.append(row);
    }
  }

  private renderDetail(state: SessionState): void {
    this.detailPane.replaceChildren();
    const record = state.records.find((r) => r.id === this.selectedId);
    if (!record) {
      this.detailPane.append(el("p", "hint",
        "Select a record to inspect it."));
      return;
    }
    const head = el("h2", "", record.cell_name);
    const meta = el("dl", "meta");
    const pairs: Array<[string, string]> = [
      ["suggested", record.suggested_label ?? "no match"],
      ["probability", fmtProb(record.probability)],
      ["instances", String(record.instance_count)],
      ["status", record.status],
    ];
    if (record.ng_resolution) pairs.push(["resolution", record.ng_resolution]);
    for (const [k, v] of pairs) {
      meta.append(el("dt", "", k), el("dd", "", v));
    }
    const topk = el("ul", "topk");
    for (const [cls, prob] of record.top_k) {
      topk.append(el("li", "", `class ${cls}: ${fmtProb(prob)}`));
    }
    const actions = el("div", "actions");
    for (const action of legalActions(record)) {
      const btn = el("button", `act-${action}`, ACTION_LABELS[action]);
      btn.addEventListener("click",
        () => this.store?.decide(record.id, action));
      actions.append(btn);
    }
    const canvas = el("canvas", "preview");
    const picker = this.buildChannelPicker(record, canvas);
    this.detailPane.append(head, meta, topk, actions, picker, canvas);
    void this.refreshPreview(record, canvas);
  }

  private buildChannelPicker(record: SuggestionRecord,
                             canvas: HTMLCanvasElement): HTMLElement {
    const select = el("select", "channel-picker");
    const overlay = el("option", "", "overlay");
    overlay.value = "overlay";
    select.append(overlay);
    CHANNEL_LABELS.forEach((label, i) => {
      const opt = el("option", "", `${i}: ${label}`);
      opt.value = String(i);
      select.append(opt);
    });
    select.value = this.channelChoice;
    select.addEventListener("change", () => {
      this.channelChoice = select.value;
      void this.refreshPreview(record, canvas);
    });
    return select;
  }

  private async refreshPreview(record: SuggestionRecord,
                               canvas: HTMLCanvasElement): Promise<void> {
    if (!this.previews) return;
    try {
      const rendered = this.channelChoice === "overlay"
        ? await this.previews.renderOverlay(record.design_hash)
        : await this.previews.renderChannel(
            record.design_hash, Number(this.channelChoice));
      paintPreview(canvas, rendered);
    } catch (e) {
      this.errorBar.textContent = e instanceof Error ? e.message : String(e);
    }
  }
}

function saveTextFile(text: string, filename: string): void {
  const blob = new Blob([text], { type: "application/json" });
  const url = URL.createObjectURL(blob);
  const anchor = document.createElement("a");
  anchor.href = url;
  anchor.download = filename;
  anchor.click();
  URL.revokeObjectURL(url);
}

export function mountApp(root: HTMLElement, opts: AppOptions): App {
  const app = new App(root, opts);
  app.mount();
  return app;
}
