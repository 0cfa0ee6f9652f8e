import { DeformResponse, EditOp, ExportDoc, SessionDoc } from "./types.js";

export class ApiError extends Error {
  status: number;
  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the annotation service's REST surface. */
export class ApiClient {
  private baseUrl: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl: FetchLike = (...a) => fetch(...a)) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await res.text();
    if (!res.ok) {
      let message = text;
      try {
        message = (JSON.parse(text) as { error?: string }).error ?? text;
      } catch {
        /* not json */
      }
      throw new ApiError(res.status, message);
    }
    return JSON.parse(text) as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/healthz");
  }

  createSession(body: {
    image_png: string;
    masks_png?: string[];
    instances?: unknown[];
    boxes?: number[][];
    label?: string;
  }): Promise<SessionDoc> {
    return this.request("POST", "/sessions", body);
  }

  getSession(id: string): Promise<SessionDoc> {
    return this.request("GET", `/sessions/${id}`);
  }

  addInstance(
    id: string,
    body: { box?: number[]; mask_png?: string; label?: string },
  ): Promise<{ instance: number; polygons: number[][][] }> {
    return this.request("POST", `/sessions/${id}/instances`, body);
  }

  patchVertices(
    id: string,
    instance: number,
    ops: EditOp[],
  ): Promise<{ instance: number; polygons: number[][][] }> {
    return this.request("PATCH", `/sessions/${id}/instances/${instance}/vertices`, { ops });
  }

  deform(id: string, instance: number, mode = "annotation"): Promise<DeformResponse> {
    return this.request("POST", `/sessions/${id}/instances/${instance}/deform`, { mode });
  }

  exportSession(id: string): Promise<ExportDoc> {
    return this.request("GET", `/sessions/${id}/export`);
  }

  /** Raw export bytes, for byte-exact golden comparisons and downloads. */
  async exportRaw(id: string): Promise<string> {
    const res = await this.fetchImpl(`${this.baseUrl}/sessions/${id}/export`, {
      method: "GET",
    });
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return res.text();
  }
}
