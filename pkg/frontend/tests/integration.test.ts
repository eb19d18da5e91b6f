/**
 * End-to-end check against a live service instance.
 *
 * Spawns the Python server, drives the same client code the browser uses:
 * create session -> pen scribble -> run job -> poll -> image refresh,
 * verifies a concurrent submit surfaces 409, and round-trips a polygon
 * region through the shared rasterization conventions.
 */

import { ChildProcess, spawn } from "node:child_process";
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, BusyError } from "../src/api.js";
import { rasterizePolygon, rleEncode, strokeMask, Vertex } from "../src/mask.js";
import { regionFromMask, UiSession } from "../src/session.js";

const here = dirname(fileURLToPath(import.meta.url));
const ADDR = process.env.CEMX_TEST_ADDR ?? "127.0.0.1:8791";
const BASE = `http://${ADDR}`;
const LR_PNG = readFileSync(join(here, "..", "fixtures", "lr8.png"));

let server: ChildProcess | null = null;

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 100; i++) {
    try {
      await fetch(`${BASE}/sessions/probe/image.png`);
      return; // any HTTP response means the server is up
    } catch {
      await new Promise((resolve) => setTimeout(resolve, 100));
    }
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  server = spawn("python3", ["-m", "cemx.cli", "serve", "--addr", ADDR],
                 { cwd: join(here, "..", ".."), stdio: "ignore" });
  await waitForServer();
}, 30000);

afterAll(() => {
  server?.kill();
});

function lrBlob(): Blob {
  return new Blob([LR_PNG], { type: "image/png" });
}

describe("live service", () => {
  it("create -> scribble -> job -> poll -> image refresh", async () => {
    const api = new ApiClient(BASE);
    const info = await api.createSession(lrBlob(), { scale: 2 });
    expect(info.hr_dims).toEqual([16, 16]);
    const session = new UiSession(api, info.id, info.hr_dims, {}, 50);

    const before = await api.fetchImage(info.id);
    const stroke: Vertex[] = [[4, 3], [5, 8], [7, 12]];
    const mask = strokeMask(stroke, 3, info.hr_dims);
    expect(mask.count()).toBeGreaterThan(0);

    const status = await session.runEdit({
      tool: "scribble",
      region: regionFromMask(mask),
      params: { target: [0.9] },
      steps: 12,
    });
    expect(status?.state).toBe("done");
    expect(status!.trace.length).toBe(status!.step);

    const after = await api.fetchImage(info.id);
    expect(Buffer.from(after).equals(Buffer.from(before))).toBe(false);

    const rep = await api.consistency(info.id);
    expect(rep.linf).toBeLessThanOrEqual(1e-8);
  }, 60000);

  it("surfaces 409 while a job is running", async () => {
    const api = new ApiClient(BASE);
    const info = await api.createSession(lrBlob(), { scale: 2 });
    const spec = { tool: "scribble", params: { target: [0.2] }, steps: 400 };
    const jobId = await api.submitEdit(info.id, spec);
    let sawBusy = false;
    // hammer until the worker picks the job up or it finishes
    for (let i = 0; i < 50 && !sawBusy; i++) {
      try {
        await api.submitEdit(info.id, spec);
      } catch (err) {
        expect(err).toBeInstanceOf(BusyError);
        sawBusy = true;
      }
      const s = await api.jobStatus(info.id, jobId);
      if (s.state !== "running") break;
    }
    expect(sawBusy).toBe(true);
    await api.pollJob(info.id, jobId, 50);
  }, 60000);

  it("polygon region rasterizes identically on both sides", async () => {
    const fixture = JSON.parse(readFileSync(
      join(here, "..", "fixtures", "polygon_mask.json"), "utf-8"));
    const mask = rasterizePolygon(fixture.polygon as Vertex[],
                                  fixture.dims as [number, number]);
    // local rasterization matches the frozen server-side encoding
    expect(rleEncode(mask)).toEqual(fixture.rle);

    // and the server accepts both spellings of the same region: the jobs
    // succeed and produce identical images from identical sessions
    const api = new ApiClient(BASE);
    const run = async (region: Record<string, unknown>) => {
      const info = await api.createSession(lrBlob(), { scale: 3 });
      expect(info.hr_dims).toEqual([24, 24]);
      const jid = await api.submitEdit(info.id, {
        tool: "scribble", region, params: { target: [0.7] }, steps: 5,
      });
      const status = await api.pollJob(info.id, jid, 50);
      expect(status.state).toBe("done");
      return { image: await api.fetchImage(info.id), trace: status.trace };
    };
    const viaPolygon = await run({ polygon: fixture.polygon });
    const viaRle = await run({ rle: rleEncode(mask) });
    expect(viaPolygon.trace).toEqual(viaRle.trace);
    expect(Buffer.from(viaPolygon.image).equals(
      Buffer.from(viaRle.image))).toBe(true);
  }, 60000);
});
