/** Client-side session state: polling, optimistic decisions, and a FIFO
 * mutation queue so the server sees at most one write at a time. */

import {
  ApiClient, ApiError, DecisionAction, SessionStats, SuggestionRecord,
} from "./api.js";

export interface SessionState {
  records: SuggestionRecord[];
  version: number;
  stats: SessionStats | null;
  error: string | null;
}

type Listener = (state: SessionState) => void;

/** Actions a record accepts in its current status, in display order. */
export function legalActions(record: SuggestionRecord): DecisionAction[] {
  if (record.status === "pending") {
    return ["approve", "reject_flatten", "reject_manual"];
  }
  if (record.status === "auto_ng" && record.ng_resolution === null) {
    return ["flatten", "manual"];
  }
  return [];
}

export class SessionStore {
  private records: SuggestionRecord[] = [];
  private version = -1;
  private stats: SessionStats | null = null;
  private pollError: string | null = null;
  private actionError: string | null = null;
  private listeners: Listener[] = [];
  private overrides = new Map<string, SuggestionRecord>();
  private requested = new Set<string>();
  private pendingWrites: Array<() => Promise<void>> = [];
  private writing = false;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly api: ApiClient,
    readonly sessionId: string,
  ) {}

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit(): void {
    const state = this.state();
    for (const fn of this.listeners) fn(state);
  }

  state(): SessionState {
    const records = this.records.map(
      (r) => this.overrides.get(r.id) ?? r);
    return {
      records,
      version: this.version,
      stats: this.stats,
      error: this.actionError ?? this.pollError,
    };
  }

  start(intervalMs = 1000): void {
    if (this.timer !== null) return;
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  async refresh(): Promise<void> {
    try {
      const [queue, stats] = await Promise.all([
        this.api.queue(this.sessionId),
        this.api.stats(this.sessionId),
      ]);
      this.records = queue.records;
      this.stats = stats;
      this.pollError = null;
      if (queue.version !== this.version) {
        this.version = queue.version;
        // Server-side drains supersede any optimistic copies we hold.
        for (const r of queue.records) {
          const o = this.overrides.get(r.id);
          if (o && r.status !== o.status) this.overrides.delete(r.id);
          if (o && r.ng_resolution !== null) this.overrides.delete(r.id);
        }
      }
    } catch (e) {
      this.pollError = e instanceof Error ? e.message : String(e);
    }
    this.emit();
  }

  /** Queue a decision. No-op when the record is already resolved or a
   * request for it is still in flight. */
  decide(recordId: string, action: DecisionAction): void {
    if (this.requested.has(recordId)) return;
    const current = this.overrides.get(recordId)
      ?? this.records.find((r) => r.id === recordId);
    if (!current || !legalActions(current).includes(action)) return;
    this.requested.add(recordId);
    this.actionError = null;
    this.overrides.set(recordId, this.optimistic(current, action));
    this.emit();
    this.pendingWrites.push(async () => {
      try {
        const updated = await this.api.decide(recordId, action);
        this.overrides.set(recordId, updated);
      } catch (e) {
        // A 409 means our view was stale; drop the guess and re-sync.
        this.overrides.delete(recordId);
        this.actionError = e instanceof ApiError
          ? e.detail : e instanceof Error ? e.message : String(e);
      } finally {
        this.requested.delete(recordId);
      }
      await this.refresh();
    });
    void this.drainWrites();
  }

  private optimistic(record: SuggestionRecord, action: DecisionAction):
      SuggestionRecord {
    const copy = { ...record };
    switch (action) {
      case "approve":
        copy.status = "approved";
        break;
      case "reject_flatten":
        copy.status = "rejected_flattened";
        break;
      case "reject_manual":
        copy.status = "rejected_manual";
        break;
      case "flatten":
        copy.ng_resolution = "flattened";
        break;
      case "manual":
        copy.ng_resolution = "manual";
        break;
    }
    return copy;
  }

  private async drainWrites(): Promise<void> {
    if (this.writing) return;
    this.writing = true;
    try {
      while (this.pendingWrites.length > 0) {
        const job = this.pendingWrites.shift()!;
        await job();
      }
    } finally {
      this.writing = false;
    }
  }

  /** Wait until queued decisions have been sent and answered. */
  async flush(): Promise<void> {
    while (this.writing || this.pendingWrites.length > 0) {
      await new Promise((resolve) => setTimeout(resolve, 10));
    }
  }

  get complete(): boolean {
    return this.stats?.complete ?? false;
  }

  /** Report body, only once every record is resolved. */
  async report(): Promise<string> {
    if (!this.complete) {
      throw new Error("session still has unresolved records");
    }
    return this.api.reportText(this.sessionId);
  }
}
