import { describe, expect, it } from "vitest";
import { ApiClient, ApiError } from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function clientWith(status: number, body: unknown,
                    calls: Call[] = []): ApiClient {
  return new ApiClient("http://svc", (url, init) => {
    calls.push({ url, init });
    const text = typeof body === "string" ? body : JSON.stringify(body);
    return Promise.resolve(new Response(text, {
      status,
      headers: { "content-type": "application/json" },
    }));
  });
}

describe("ApiClient", () => {
  it("posts session requests as JSON and parses the reply", async () => {
    const calls: Call[] = [];
    const api = clientWith(201, {
      session_id: "s1", top: "TOP", class_count: 3,
    }, calls);
    const info = await api.createSession({ gdsii_path: "/a.gds", top: "TOP" });
    expect(info.session_id).toBe("s1");
    expect(info.class_count).toBe(3);
    expect(calls[0]?.url).toBe("http://svc/sessions");
    expect(calls[0]?.init?.method).toBe("POST");
    expect(JSON.parse(String(calls[0]?.init?.body))).toEqual({
      gdsii_path: "/a.gds", top: "TOP",
    });
  });

  it("surfaces server error bodies as ApiError with detail", async () => {
    const api = clientWith(400, { error: "ParseError", detail: "bad magic" });
    await expect(api.createSession({ gdsii_path: "/bad" }))
      .rejects.toMatchObject({ status: 400, detail: "bad magic" });
    await expect(api.createSession({ gdsii_path: "/bad" }))
      .rejects.toBeInstanceOf(ApiError);
  });

  it("keeps the status text when the error body is not JSON", async () => {
    const api = new ApiClient("http://svc", () => Promise.resolve(
      new Response("<html>oops</html>", {
        status: 502, statusText: "Bad Gateway",
      })));
    await expect(api.stats("s1"))
      .rejects.toMatchObject({ status: 502, detail: "Bad Gateway" });
  });

  it("builds queue URLs with an optional status filter", async () => {
    const calls: Call[] = [];
    const api = clientWith(200, { version: 1, records: [] }, calls);
    await api.queue("s1");
    await api.queue("s1", "auto_ng");
    expect(calls[0]?.url).toBe("http://svc/sessions/s1/queue");
    expect(calls[1]?.url).toBe("http://svc/sessions/s1/queue?status=auto_ng");
  });

  it("posts decisions to the suggestion endpoint", async () => {
    const calls: Call[] = [];
    const api = clientWith(200, { status: "approved" }, calls);
    await api.decide("s1.abcd", "approve");
    expect(calls[0]?.url).toBe("http://svc/suggestions/s1.abcd/decision");
    expect(JSON.parse(String(calls[0]?.init?.body)))
      .toEqual({ action: "approve" });
  });

  it("requests previews by session, hash, and channel", async () => {
    const calls: Call[] = [];
    const api = clientWith(200, {
      design_hash: "abcd", channel: 3, size: 64, pixels: [[0]],
    }, calls);
    const p = await api.preview("s1", "abcd", 3);
    expect(p.channel).toBe(3);
    expect(calls[0]?.url).toBe("http://svc/cells/s1/abcd/preview?channel=3");
  });

  it("returns the report body untouched", async () => {
    const raw = "{\n  \"a\": 1\n}";
    const api = clientWith(200, raw);
    expect(await api.reportText("s1")).toBe(raw);
  });
});
