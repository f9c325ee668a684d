import type { Box } from "./box.js";
import { boxToWire } from "./box.js";
import type { InferResponse } from "./state.js";

export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

function detailMessage(body: unknown): string | null {
  if (typeof body !== "object" || body === null) return null;
  const detail = (body as { detail?: unknown }).detail;
  if (!Array.isArray(detail)) return null;
  const parts = detail
    .map((d) =>
      typeof d === "object" && d !== null && "message" in d
        ? `${String((d as { field?: unknown }).field ?? "request")}: ${String(
            (d as { message: unknown }).message,
          )}`
        : null,
    )
    .filter((p): p is string => p !== null);
  return parts.length > 0 ? parts.join("; ") : null;
}

/**
 * Client for the inference service. At most one request is considered live:
 * starting a new one aborts the previous and any response that arrives for a
 * superseded request resolves to null so the view never shows stale results.
 */
export class ApiClient {
  private seq = 0;
  private controller: AbortController | null = null;

  constructor(
    private endpoint: string,
    private fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  setEndpoint(endpoint: string): void {
    this.endpoint = endpoint;
  }

  getEndpoint(): string {
    return this.endpoint;
  }

  /** POST /infer; resolves null when a newer request superseded this one. */
  async infer(
    imageB64: string,
    box: Box,
    k = 5,
  ): Promise<InferResponse | null> {
    const token = ++this.seq;
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    let response: Response;
    try {
      response = await this.fetchFn(`${this.endpoint.replace(/\/$/, "")}/infer`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ image: imageB64, box: boxToWire(box), k }),
        signal: controller.signal,
      });
    } catch (err) {
      if (token !== this.seq) return null; // aborted by a newer request
      throw err;
    }
    if (token !== this.seq) return null;
    if (!response.ok) {
      let message = `service answered ${response.status}`;
      try {
        const body: unknown = await response.json();
        message = detailMessage(body) ?? message;
      } catch {
        // keep the status-line message
      }
      throw new ApiError(message, response.status);
    }
    const body = (await response.json()) as InferResponse;
    if (token !== this.seq) return null;
    return body;
  }

  /** GET /health; returns the reported model version. */
  async health(): Promise<string> {
    const response = await this.fetchFn(`${this.endpoint.replace(/\/$/, "")}/health`);
    if (!response.ok) {
      throw new ApiError(`health check answered ${response.status}`, response.status);
    }
    const body = (await response.json()) as { model_version?: string };
    return body.model_version ?? "unknown";
  }
}
