/**
 * Region masks shared with the editing service.
 *
 * The server rasterizes regions with the same conventions used here:
 * even-odd polygon fill sampled at pixel centers (+0.5), vertices given as
 * (row, col), and run-length encoding of the row-major mask starting with a
 * zero run.  Keeping the two implementations bit-identical is what lets the
 * on-screen overlay and the server-side mask agree exactly.
 */

export type Dims = [rows: number, cols: number];
export type Vertex = [row: number, col: number];

/** Binary mask stored row-major as 0/1 bytes. */
export class Mask {
  constructor(readonly dims: Dims, readonly data: Uint8Array) {
    if (data.length !== dims[0] * dims[1]) {
      throw new Error(`mask data length ${data.length} != ${dims[0]}x${dims[1]}`);
    }
  }

  static empty(dims: Dims): Mask {
    return new Mask(dims, new Uint8Array(dims[0] * dims[1]));
  }

  get(row: number, col: number): number {
    return this.data[row * this.dims[1] + col];
  }

  set(row: number, col: number, value: number): void {
    const [rows, cols] = this.dims;
    if (row >= 0 && row < rows && col >= 0 && col < cols) {
      this.data[row * cols + col] = value ? 1 : 0;
    }
  }

  count(): number {
    let n = 0;
    for (const v of this.data) n += v;
    return n;
  }

  union(other: Mask): Mask {
    const out = new Uint8Array(this.data.length);
    for (let i = 0; i < out.length; i++) out[i] = this.data[i] | other.data[i];
    return new Mask(this.dims, out);
  }
}

export function rectMask(dims: Dims, r0: number, c0: number,
                         height: number, width: number): Mask {
  const mask = Mask.empty(dims);
  for (let r = r0; r < r0 + height; r++) {
    for (let c = c0; c < c0 + width; c++) mask.set(r, c, 1);
  }
  return mask;
}

/** Even-odd fill of a closed polygon, sampled at pixel centers. */
export function rasterizePolygon(points: Vertex[], dims: Dims): Mask {
  if (points.length < 3) {
    throw new Error("polygon needs at least 3 (row, col) vertices");
  }
  const [rows, cols] = dims;
  const mask = Mask.empty(dims);
  const n = points.length;
  for (let r = 0; r < rows; r++) {
    const cy = r + 0.5;
    for (let c = 0; c < cols; c++) {
      const cx = c + 0.5;
      let inside = false;
      for (let i = 0; i < n; i++) {
        const [y0, x0] = points[i];
        const [y1, x1] = points[(i + 1) % n];
        if ((y0 <= cy) !== (y1 <= cy)) {
          const xAt = x0 + ((cy - y0) * (x1 - x0)) / (y1 - y0);
          if (cx < xAt) inside = !inside;
        }
      }
      if (inside) mask.set(r, c, 1);
    }
  }
  return mask;
}

/** Disc of diameter `width` around a single point, for pen dabs. */
export function stampDisc(mask: Mask, row: number, col: number,
                          width: number): void {
  const radius = Math.max(width, 1) / 2;
  const r0 = Math.floor(row - radius);
  const r1 = Math.ceil(row + radius);
  for (let r = r0; r <= r1; r++) {
    for (let c = Math.floor(col - radius); c <= Math.ceil(col + radius); c++) {
      const dr = r + 0.5 - row;
      const dc = c + 0.5 - col;
      if (dr * dr + dc * dc <= radius * radius) mask.set(r, c, 1);
    }
  }
}

/** Pixels whose center lies within width/2 of the polyline. */
export function strokeMask(points: Vertex[], width: number, dims: Dims): Mask {
  const mask = Mask.empty(dims);
  if (points.length === 0) return mask;
  if (points.length === 1) {
    stampDisc(mask, points[0][0], points[0][1], width);
    return mask;
  }
  const radius = Math.max(width, 1) / 2;
  const r2 = radius * radius;
  for (let i = 0; i + 1 < points.length; i++) {
    const [ay, ax] = points[i];
    const [by, bx] = points[i + 1];
    const dy = by - ay;
    const dx = bx - ax;
    const len2 = dy * dy + dx * dx;
    const rLo = Math.floor(Math.min(ay, by) - radius);
    const rHi = Math.ceil(Math.max(ay, by) + radius);
    const cLo = Math.floor(Math.min(ax, bx) - radius);
    const cHi = Math.ceil(Math.max(ax, bx) + radius);
    for (let r = rLo; r <= rHi; r++) {
      for (let c = cLo; c <= cHi; c++) {
        const py = r + 0.5;
        const px = c + 0.5;
        let t = len2 > 0 ? ((py - ay) * dy + (px - ax) * dx) / len2 : 0;
        t = Math.min(1, Math.max(0, t));
        const qy = ay + t * dy - py;
        const qx = ax + t * dx - px;
        if (qy * qy + qx * qx <= r2) mask.set(r, c, 1);
      }
    }
  }
  return mask;
}

export function circleMask(center: Vertex, radius: number, dims: Dims): Mask {
  const mask = Mask.empty(dims);
  stampDisc(mask, center[0], center[1], radius * 2);
  return mask;
}

/** Run lengths of the row-major mask, starting with zeros. */
export function rleEncode(mask: Mask): number[] {
  const runs: number[] = [];
  let current = 0;
  let count = 0;
  for (const v of mask.data) {
    if (v === current) {
      count++;
    } else {
      runs.push(count);
      current = v;
      count = 1;
    }
  }
  runs.push(count);
  return runs;
}

export function rleDecode(runs: number[], dims: Dims): Mask {
  const total = dims[0] * dims[1];
  const data = new Uint8Array(total);
  let pos = 0;
  let val = 0;
  for (const run of runs) {
    if (run < 0 || pos + run > total) {
      throw new Error("run-length data does not fit the mask dims");
    }
    if (val) data.fill(1, pos, pos + run);
    pos += run;
    val ^= 1;
  }
  if (pos !== total) throw new Error("run-length data does not cover the mask");
  return new Mask(dims, data);
}
