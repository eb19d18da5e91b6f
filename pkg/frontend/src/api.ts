/** Typed client for the editing service's HTTP API. */

export interface SessionInfo {
  id: string;
  hr_dims: [number, number];
}

export interface JobStatus {
  state: "running" | "done" | "failed";
  step: number;
  trace: number[];
  error?: string;
}

export interface ConsistencyReport {
  linf: number;
  rms: number;
}

export interface EditSpec {
  tool: string;
  region?: Record<string, unknown>;
  params?: Record<string, unknown>;
  steps?: number;
  step_size?: number;
}

export interface AlternativesResponse {
  count: number;
  previews: string[]; // base64 PNG
}

/** The server rejected the call because another operation is in flight. */
export class BusyError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "BusyError";
  }
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function raiseFor(r: Response): Promise<Response> {
  if (r.ok) return r;
  const text = await r.text();
  let detail = text;
  try {
    detail = JSON.parse(text).detail ?? text;
  } catch {
    /* plain-text body */
  }
  if (r.status === 409) throw new BusyError(detail);
  throw new ApiError(r.status, detail);
}

export class ApiClient {
  constructor(readonly baseUrl: string,
              private readonly fetchFn: FetchLike = fetch) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async postJson(path: string, body: unknown): Promise<Response> {
    const r = await this.fetchFn(this.url(path), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return raiseFor(r);
  }

  async createSession(lrPng: Blob, opts: { scale: number; mode?: string;
                      boundary?: string; kernel?: Blob } = { scale: 2 }
                      ): Promise<SessionInfo> {
    const form = new FormData();
    form.append("lr", lrPng, "lr.png");
    form.append("scale", String(opts.scale));
    if (opts.mode) form.append("mode", opts.mode);
    if (opts.boundary) form.append("boundary", opts.boundary);
    if (opts.kernel) form.append("kernel", opts.kernel, "kernel.json");
    const r = await this.fetchFn(this.url("/sessions"),
                                 { method: "POST", body: form });
    return (await raiseFor(r)).json();
  }

  imageUrl(sessionId: string): string {
    return this.url(`/sessions/${sessionId}/image.png`);
  }

  async fetchImage(sessionId: string): Promise<ArrayBuffer> {
    const r = await raiseFor(await this.fetchFn(this.imageUrl(sessionId)));
    return r.arrayBuffer();
  }

  async submitEdit(sessionId: string, spec: EditSpec): Promise<string> {
    const r = await this.postJson(`/sessions/${sessionId}/edits`, spec);
    return (await r.json()).job_id;
  }

  async jobStatus(sessionId: string, jobId: string): Promise<JobStatus> {
    const r = await raiseFor(await this.fetchFn(
      this.url(`/sessions/${sessionId}/jobs/${jobId}`)));
    return r.json();
  }

  /** Poll a job at `intervalMs` until it leaves the running state. */
  async pollJob(sessionId: string, jobId: string, intervalMs = 250,
                onProgress?: (status: JobStatus) => void): Promise<JobStatus> {
    for (;;) {
      const status = await this.jobStatus(sessionId, jobId);
      onProgress?.(status);
      if (status.state !== "running") return status;
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }

  async setKnobs(sessionId: string, lam1: number, lam2: number, theta: number,
                 region?: Record<string, unknown>): Promise<void> {
    await this.postJson(`/sessions/${sessionId}/knobs`,
                        { lam1, lam2, theta, ...(region ? { region } : {}) });
  }

  async undo(sessionId: string): Promise<void> {
    await raiseFor(await this.fetchFn(
      this.url(`/sessions/${sessionId}/undo`), { method: "POST" }));
  }

  async alternatives(sessionId: string, n: number,
                     opts: { anchored?: boolean; steps?: number;
                             seed?: number } = {}
                     ): Promise<AlternativesResponse> {
    const r = await this.postJson(`/sessions/${sessionId}/alternatives`,
                                  { n, ...opts });
    return r.json();
  }

  async adoptAlternative(sessionId: string, index: number): Promise<void> {
    await raiseFor(await this.fetchFn(
      this.url(`/sessions/${sessionId}/alternatives/${index}`),
      { method: "POST" }));
  }

  async consistency(sessionId: string): Promise<ConsistencyReport> {
    const r = await raiseFor(await this.fetchFn(
      this.url(`/sessions/${sessionId}/consistency`)));
    return r.json();
  }
}
