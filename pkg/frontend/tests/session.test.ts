import { describe, expect, it } from "vitest";

import { ApiClient, BusyError, FetchLike, JobStatus } from "../src/api.js";
import { formatResidual, regionFromMask, traceIsMonotone,
         UiSession } from "../src/session.js";
import { rectMask } from "../src/mask.js";

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

/** Scripted fetch: routes requests by method+path suffix. */
function scriptedFetch(log: string[],
                       routes: Record<string, () => Response>): FetchLike {
  return async (url, init) => {
    const path = new URL(url).pathname;
    const key = `${init?.method ?? "GET"} ${path}`;
    log.push(key);
    for (const [suffix, make] of Object.entries(routes)) {
      if (key.startsWith(suffix) || key === suffix) return make();
    }
    throw new Error(`unrouted request ${key}`);
  };
}

function makeSession(routes: Record<string, () => Response>,
                     events: ConstructorParameters<typeof UiSession>[3]) {
  const log: string[] = [];
  const api = new ApiClient("http://service.test", scriptedFetch(log, routes));
  const session = new UiSession(api, "s1", [16, 16], events, 1);
  return { session, log };
}

const pngBody = () => new Response(new Uint8Array([137, 80, 78, 71]).buffer,
                                   { status: 200 });

describe("job lifecycle", () => {
  it("polls until done, then refreshes image and consistency", async () => {
    let polls = 0;
    const traces: number[][] = [];
    const images: number[] = [];
    const { session, log } = makeSession({
      "POST /sessions/s1/edits": () => jsonResponse(202, { job_id: "j1" }),
      "GET /sessions/s1/jobs/j1": () => {
        polls++;
        const status: JobStatus = polls < 3
          ? { state: "running", step: polls, trace: [5, 4].slice(0, polls) }
          : { state: "done", step: 3, trace: [5, 4, 3] };
        return jsonResponse(200, status);
      },
      "GET /sessions/s1/image.png": pngBody,
      "GET /sessions/s1/consistency": () =>
        jsonResponse(200, { linf: 1e-12, rms: 1e-13 }),
    }, {
      onTrace: (t) => traces.push(t),
      onImage: (png) => images.push(png.byteLength),
    });

    const status = await session.runEdit({ tool: "scribble", steps: 3 });
    expect(status?.state).toBe("done");
    expect(traces.at(-1)).toEqual([5, 4, 3]);
    expect(images.length).toBe(1);
    expect(session.pendingJob).toBeNull();
    expect(session.canUndo).toBe(true);
    expect(log.filter((l) => l.includes("/jobs/")).length).toBe(3);
  });

  it("refuses a second submit while a job is pending", async () => {
    const busy: string[] = [];
    const { session } = makeSession({
      "POST /sessions/s1/edits": () => jsonResponse(202, { job_id: "j1" }),
      "GET /sessions/s1/jobs/j1": () =>
        jsonResponse(200, { state: "done", step: 1, trace: [1] }),
      "GET /sessions/s1/image.png": pngBody,
      "GET /sessions/s1/consistency": () =>
        jsonResponse(200, { linf: 0, rms: 0 }),
    }, { onBusy: (m) => busy.push(m) });

    expect(session.submitEnabled).toBe(true);
    const first = session.runEdit({ tool: "scribble" });
    const second = await session.runEdit({ tool: "scribble" });
    expect(second).toBeNull();
    expect(busy.length).toBe(1);
    await first;
    expect(session.submitEnabled).toBe(true);
  });

  it("surfaces a server-side 409 as a busy notice, state unchanged", async () => {
    const busy: string[] = [];
    const { session } = makeSession({
      "POST /sessions/s1/edits": () =>
        jsonResponse(409, { detail: "session is busy" }),
    }, { onBusy: (m) => busy.push(m) });

    const result = await session.runEdit({ tool: "scribble" });
    expect(result).toBeNull();
    expect(busy).toEqual(["session is busy"]);
    expect(session.pendingJob).toBeNull();
    expect(session.canUndo).toBe(false);
  });

  it("reports a failed job's error text", async () => {
    const errors: string[] = [];
    const { session } = makeSession({
      "POST /sessions/s1/edits": () => jsonResponse(202, { job_id: "j1" }),
      "GET /sessions/s1/jobs/j1": () =>
        jsonResponse(200, { state: "failed", step: 0, trace: [],
                            error: "region holds no full patch" }),
    }, { onError: (m) => errors.push(m) });

    const status = await session.runEdit({ tool: "variance" });
    expect(status?.state).toBe("failed");
    expect(errors).toEqual(["region holds no full patch"]);
  });
});

describe("api error mapping", () => {
  it("raises BusyError only for 409", async () => {
    const api409 = new ApiClient("http://t", async () =>
      jsonResponse(409, { detail: "nothing to undo" }));
    await expect(api409.undo("s1")).rejects.toBeInstanceOf(BusyError);
    const api404 = new ApiClient("http://t", async () =>
      jsonResponse(404, { detail: "unknown session" }));
    await expect(api404.undo("s1")).rejects.toThrow("unknown session");
  });
});

describe("status helpers", () => {
  it("formats residuals in scientific notation", () => {
    expect(formatResidual(3.21e-16)).toBe("3.2e-16");
    expect(formatResidual(0)).toBe("0.0e+0");
  });

  it("recognizes monotone traces", () => {
    expect(traceIsMonotone([5, 4, 4, 3])).toBe(true);
    expect(traceIsMonotone([5, 4, 4.5])).toBe(false);
    expect(traceIsMonotone([])).toBe(true);
  });

  it("encodes edit regions as run-length masks", () => {
    const region = regionFromMask(rectMask([4, 4], 0, 0, 1, 1));
    expect(region).toEqual({ rle: [0, 1, 15] });
  });
});
