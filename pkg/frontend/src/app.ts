/** Browser entry point: wires the canvas, tool panel, and status bar. */

import { ApiClient } from "./api.js";
import { circleMask, Mask, rasterizePolygon, rectMask, strokeMask,
         Vertex } from "./mask.js";
import { formatResidual, regionFromMask, ToolName, UiSession,
         traceIsMonotone } from "./session.js";

const SCALE_UP = 8; // display zoom: one image pixel -> 8x8 screen pixels

interface AppState {
  session: UiSession | null;
  mask: Mask | null;
  strokePoints: Vertex[];
  drawing: boolean;
  imageBitmap: ImageBitmap | null;
}

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

function canvasToImage(ev: MouseEvent, canvas: HTMLCanvasElement): Vertex {
  const box = canvas.getBoundingClientRect();
  const col = ((ev.clientX - box.left) / box.width) * canvas.width / SCALE_UP;
  const row = ((ev.clientY - box.top) / box.height) * canvas.height / SCALE_UP;
  return [row, col];
}

function redraw(state: AppState, canvas: HTMLCanvasElement): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (state.imageBitmap) {
    ctx.drawImage(state.imageBitmap, 0, 0, canvas.width, canvas.height);
  }
  if (state.mask) {
    ctx.fillStyle = "rgba(255, 80, 80, 0.35)";
    const [rows, cols] = state.mask.dims;
    for (let r = 0; r < rows; r++) {
      for (let c = 0; c < cols; c++) {
        if (state.mask.get(r, c)) {
          ctx.fillRect(c * SCALE_UP, r * SCALE_UP, SCALE_UP, SCALE_UP);
        }
      }
    }
  }
}

function buildRegionMask(state: AppState, tool: ToolName,
                         width: number): Mask | null {
  const dims = state.session?.hrDims;
  if (!dims || state.strokePoints.length === 0) return null;
  const pts = state.strokePoints;
  switch (tool) {
    case "pen":
      return strokeMask(pts, width, dims);
    case "line":
      return strokeMask([pts[0], pts[pts.length - 1]], width, dims);
    case "polygon":
      return pts.length >= 3 ? rasterizePolygon(pts, dims) : null;
    case "rect": {
      const [r0, c0] = pts[0];
      const [r1, c1] = pts[pts.length - 1];
      return rectMask(dims, Math.floor(Math.min(r0, r1)),
                      Math.floor(Math.min(c0, c1)),
                      Math.max(1, Math.round(Math.abs(r1 - r0))),
                      Math.max(1, Math.round(Math.abs(c1 - c0))));
    }
    case "circle": {
      const [r0, c0] = pts[0];
      const [r1, c1] = pts[pts.length - 1];
      return circleMask(pts[0], Math.hypot(r1 - r0, c1 - c0), dims);
    }
    default:
      return null;
  }
}

function specForTool(state: AppState, tool: ToolName,
                     region: Record<string, unknown>):
    { tool: string; region: Record<string, unknown>;
      params: Record<string, unknown> } | null {
  const color = (state.session?.tool.color ?? [0.8, 0.8, 0.8]) as number[];
  switch (tool) {
    case "pen":
    case "line":
    case "polygon":
    case "rect":
    case "circle":
      return { tool: "scribble", region, params: { target: color } };
    case "brighten":
    case "darken":
      return { tool, region, params: { factor: 1.3 } };
    case "tv_min":
      return { tool: "tv_min", region, params: {} };
    case "variance":
      return { tool: "variance", region, params: { delta: 0.05 } };
    case "magnitude":
      return { tool: "magnitude", region, params: { factor: 1.5 } };
    case "periodicity":
      return { tool: "periodicity", region,
               params: { directions: [[0, 1], [1, 0]] } };
    case "imprint": {
      const imp = state.session?.tool.imprint;
      if (!imp) return null;
      return { tool: "imprint", region,
               params: { rect: imp.rect, offset: imp.offset } };
    }
    default:
      return null;
  }
}

export function startApp(baseUrl: string): void {
  const api = new ApiClient(baseUrl);
  const canvas = $("canvas") as HTMLCanvasElement;
  const state: AppState = { session: null, mask: null, strokePoints: [],
                            drawing: false, imageBitmap: null };

  const status = $("status");
  const sparkline = $("sparkline") as HTMLCanvasElement;
  const submit = $("run") as HTMLButtonElement;

  function drawSparkline(trace: number[]): void {
    const ctx = sparkline.getContext("2d");
    if (!ctx || trace.length === 0) return;
    ctx.clearRect(0, 0, sparkline.width, sparkline.height);
    const lo = Math.min(...trace);
    const hi = Math.max(...trace);
    const span = hi - lo || 1;
    ctx.strokeStyle = traceIsMonotone(trace) ? "#2a7" : "#c33";
    ctx.beginPath();
    trace.forEach((v, i) => {
      const x = (i / Math.max(1, trace.length - 1)) * sparkline.width;
      const y = sparkline.height * (1 - (v - lo) / span);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }

  async function showImage(png: ArrayBuffer): Promise<void> {
    state.imageBitmap = await createImageBitmap(
      new Blob([png], { type: "image/png" }));
    redraw(state, canvas);
  }

  const events = {
    onImage: (png: ArrayBuffer) => { void showImage(png); },
    onTrace: drawSparkline,
    onConsistency: (linf: number) => {
      status.textContent = `residual ${formatResidual(linf)}`;
    },
    onBusy: (msg: string) => { status.textContent = `busy: ${msg}`; },
    onError: (msg: string) => { status.textContent = `error: ${msg}`; },
    onJobDone: () => { submit.disabled = false; },
  };

  ($("create") as HTMLButtonElement).addEventListener("click", async () => {
    const file = ($("lr") as HTMLInputElement).files?.[0];
    if (!file) return;
    const scale = Number(($("scale") as HTMLInputElement).value) || 2;
    const info = await api.createSession(file, { scale });
    state.session = new UiSession(api, info.id, info.hr_dims, events);
    canvas.width = info.hr_dims[1] * SCALE_UP;
    canvas.height = info.hr_dims[0] * SCALE_UP;
    await showImage(await api.fetchImage(info.id));
  });

  canvas.addEventListener("mousedown", (ev) => {
    state.drawing = true;
    state.strokePoints = [canvasToImage(ev, canvas)];
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (!state.drawing || !state.session) return;
    state.strokePoints.push(canvasToImage(ev, canvas));
    const tool = state.session.tool.active;
    state.mask = buildRegionMask(state, tool, state.session.tool.width);
    redraw(state, canvas);
  });
  canvas.addEventListener("mouseup", () => { state.drawing = false; });

  submit.addEventListener("click", async () => {
    const session = state.session;
    if (!session || !state.mask) return;
    const spec = specForTool(state, session.tool.active,
                             regionFromMask(state.mask));
    if (!spec) return;
    submit.disabled = true;
    await session.runEdit({ ...spec, steps: 50 });
    submit.disabled = false;
  });

  ($("undo") as HTMLButtonElement).addEventListener("click", () => {
    void state.session?.undo();
  });

  for (const input of ["lam1", "lam2", "theta"]) {
    $(input).addEventListener("change", () => {
      const session = state.session;
      if (!session) return;
      void session.setKnobs(
        Number(($("lam1") as HTMLInputElement).value),
        Number(($("lam2") as HTMLInputElement).value),
        Number(($("theta") as HTMLInputElement).value),
        state.mask ? regionFromMask(state.mask) : undefined);
    });
  }

  ($("alternatives") as HTMLButtonElement).addEventListener("click",
      async () => {
    const session = state.session;
    if (!session) return;
    const grid = $("alt-grid");
    grid.innerHTML = "";
    const res = await session.api.alternatives(session.id, 4);
    res.previews.forEach((b64, i) => {
      const img = document.createElement("img");
      img.src = `data:image/png;base64,${b64}`;
      img.addEventListener("click", () => {
        void session.adoptAlternative(i);
      });
      grid.appendChild(img);
    });
  });

  document.querySelectorAll<HTMLButtonElement>("[data-tool]").forEach((b) => {
    b.addEventListener("click", () => {
      if (state.session) {
        state.session.tool.active = b.dataset.tool as ToolName;
      }
    });
  });

  // imprint nudging with the four arrow buttons
  const nudges: Record<string, [number, number]> = {
    "nudge-up": [-1, 0], "nudge-down": [1, 0],
    "nudge-left": [0, -1], "nudge-right": [0, 1],
  };
  for (const [id, [dr, dc]] of Object.entries(nudges)) {
    $(id).addEventListener("click", () => {
      const imp = state.session?.tool.imprint;
      if (!imp) return;
      imp.offset = [imp.offset[0] + dr, imp.offset[1] + dc];
      redraw(state, canvas);
    });
  }
}
