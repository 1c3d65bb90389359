/** Typed client for the examination service. All UI traffic goes through
 * here; nothing else touches the network. */

export interface Site {
  path: string;
  x: number;
  y: number;
  rotation: number;
  mirrored: boolean;
}

export interface SuggestionRecord {
  id: string;
  design_hash: string;
  cell_name: string;
  suggested_class: number | null;
  suggested_label: string | null;
  probability: number | null;
  top_k: Array<[number, number]>;
  status: string;
  ng_resolution: string | null;
  instance_count: number;
  example_path: string;
  instances: Site[];
}

export interface QueueView {
  version: number;
  records: SuggestionRecord[];
}

export interface SessionInfo {
  session_id: string;
  top: string;
  class_count: number;
}

export interface SessionStats {
  version: number;
  complete: boolean;
  counters: Record<string, number>;
  timing_ms: Record<string, number>;
  partition: Record<string, number>;
}

export interface ChannelPreview {
  design_hash: string;
  channel: number;
  size: number;
  pixels: number[][];
}

export interface SessionRequest {
  gdsii_path: string;
  model_path?: string;
  top?: string;
  threshold?: number;
  top_k?: number;
}

/** Actions legal on a pending record / on an auto-NG record. */
export type DecisionAction =
  | "approve" | "reject_flatten" | "reject_manual"
  | "flatten" | "manual";

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`${status}: ${detail}`);
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        detail = body.detail ?? JSON.stringify(body);
      } catch {
        /* non-JSON error body: keep the status text */
      }
      throw new ApiError(resp.status, detail);
    }
    return resp;
  }

  private async getJson<T>(path: string): Promise<T> {
    return (await this.request(path)).json() as Promise<T>;
  }

  async createSession(req: SessionRequest): Promise<SessionInfo> {
    const resp = await this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    });
    return resp.json() as Promise<SessionInfo>;
  }

  queue(sessionId: string, status?: string): Promise<QueueView> {
    const q = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.getJson(`/sessions/${sessionId}/queue${q}`);
  }

  async decide(recordId: string, action: DecisionAction):
      Promise<SuggestionRecord> {
    const resp = await this.request(`/suggestions/${recordId}/decision`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ action }),
    });
    return resp.json() as Promise<SuggestionRecord>;
  }

  preview(sessionId: string, designHash: string, channel: number):
      Promise<ChannelPreview> {
    return this.getJson(
      `/cells/${sessionId}/${designHash}/preview?channel=${channel}`);
  }

  stats(sessionId: string): Promise<SessionStats> {
    return this.getJson(`/sessions/${sessionId}/stats`);
  }

  /** Raw report body; kept as text so a saved file matches byte for byte. */
  async reportText(sessionId: string): Promise<string> {
    const resp = await this.request(`/sessions/${sessionId}/report`);
    return resp.text();
  }
}
