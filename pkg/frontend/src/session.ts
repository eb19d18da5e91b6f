/** UI-side session state: one pending job, every change via the service. */

import { ApiClient, BusyError, EditSpec, JobStatus } from "./api.js";
import { Dims, Mask, rleEncode } from "./mask.js";

export type ToolName =
  | "knobs" | "pen" | "line" | "polygon" | "rect" | "circle"
  | "brighten" | "darken" | "tv_min" | "variance" | "magnitude"
  | "imprint" | "patch_source" | "patch_target" | "periodicity"
  | "diversity";

export interface ToolState {
  active: ToolName;
  color: [number, number, number];
  width: number;
  regionPolygon: [number, number][];
  imprint: { rect: [number, number, number, number]; offset: [number, number] }
    | null;
}

export function defaultToolState(): ToolState {
  return { active: "pen", color: [0.8, 0.8, 0.8], width: 2,
           regionPolygon: [], imprint: null };
}

export interface SessionEvents {
  onImage?: (png: ArrayBuffer) => void;
  onTrace?: (trace: number[]) => void;
  onConsistency?: (linf: number, rms: number) => void;
  onBusy?: (message: string) => void;
  onError?: (message: string) => void;
  onJobDone?: (status: JobStatus) => void;
}

/** Region payload for an edit spec: run-length mask bounds the body size. */
export function regionFromMask(mask: Mask): Record<string, unknown> {
  return { rle: rleEncode(mask) };
}

export class UiSession {
  pendingJob: string | null = null;
  canUndo = false;
  tool: ToolState = defaultToolState();
  lastTrace: number[] = [];

  constructor(readonly api: ApiClient, readonly id: string,
              readonly hrDims: Dims, readonly events: SessionEvents = {},
              readonly pollIntervalMs = 250) {}

  get submitEnabled(): boolean {
    return this.pendingJob === null;
  }

  private async refresh(): Promise<void> {
    const [png, rep] = await Promise.all([
      this.api.fetchImage(this.id),
      this.api.consistency(this.id),
    ]);
    this.events.onImage?.(png);
    this.events.onConsistency?.(rep.linf, rep.rms);
  }

  /** Submit an edit job; resolves when the job leaves the running state. */
  async runEdit(spec: EditSpec): Promise<JobStatus | null> {
    if (this.pendingJob !== null) {
      this.events.onBusy?.("a job is already running");
      return null;
    }
    this.pendingJob = "(submitting)";
    let jobId: string;
    try {
      jobId = await this.api.submitEdit(this.id, spec);
    } catch (err) {
      this.pendingJob = null;
      this.surface(err);
      return null;
    }
    this.pendingJob = jobId;
    try {
      const status = await this.api.pollJob(
        this.id, jobId, this.pollIntervalMs,
        (s) => {
          this.lastTrace = s.trace;
          this.events.onTrace?.(s.trace);
        });
      if (status.state === "failed") {
        this.events.onError?.(status.error ?? "job failed");
      } else {
        this.canUndo = true;
        await this.refresh();
      }
      this.events.onJobDone?.(status);
      return status;
    } finally {
      this.pendingJob = null;
    }
  }

  async setKnobs(lam1: number, lam2: number, theta: number,
                 region?: Record<string, unknown>): Promise<boolean> {
    try {
      await this.api.setKnobs(this.id, lam1, lam2, theta, region);
    } catch (err) {
      this.surface(err);
      return false;
    }
    this.canUndo = true;
    await this.refresh();
    return true;
  }

  async undo(): Promise<boolean> {
    try {
      await this.api.undo(this.id);
    } catch (err) {
      this.surface(err);
      return false;
    }
    await this.refresh();
    return true;
  }

  async adoptAlternative(index: number): Promise<boolean> {
    try {
      await this.api.adoptAlternative(this.id, index);
    } catch (err) {
      this.surface(err);
      return false;
    }
    this.canUndo = true;
    await this.refresh();
    return true;
  }

  private surface(err: unknown): void {
    if (err instanceof BusyError) {
      this.events.onBusy?.(err.message);
    } else {
      this.events.onError?.(err instanceof Error ? err.message : String(err));
    }
  }
}

/** Scientific-notation residual for the status bar, e.g. "3.2e-16". */
export function formatResidual(linf: number): string {
  return linf.toExponential(1);
}

/** True when the trace never increases — what the optimizer guarantees. */
export function traceIsMonotone(trace: number[]): boolean {
  for (let i = 1; i < trace.length; i++) {
    if (trace[i] > trace[i - 1] + 1e-15) return false;
  }
  return true;
}
