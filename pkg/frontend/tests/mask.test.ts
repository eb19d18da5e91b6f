import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { circleMask, Mask, rasterizePolygon, rectMask, rleDecode,
         rleEncode, strokeMask, Vertex } from "../src/mask.js";

const here = dirname(fileURLToPath(import.meta.url));
const fixture = JSON.parse(
  readFileSync(join(here, "..", "fixtures", "polygon_mask.json"), "utf-8"));

describe("polygon rasterization", () => {
  it("matches the server's rasterization on the fixed fixture", () => {
    const mask = rasterizePolygon(fixture.polygon as Vertex[],
                                  fixture.dims as [number, number]);
    expect(rleEncode(mask)).toEqual(fixture.rle);
  });

  it("uses the even-odd rule: star center is a hole", () => {
    const mask = rasterizePolygon(fixture.polygon as Vertex[],
                                  fixture.dims as [number, number]);
    // the pentagram's central pentagon is crossed twice -> outside
    expect(mask.get(12, 12)).toBe(0);
    expect(mask.get(4, 12)).toBe(1); // a star tip
  });

  it("rejects degenerate polygons", () => {
    expect(() => rasterizePolygon([[0, 0], [1, 1]], [4, 4])).toThrow();
  });
});

describe("run-length encoding", () => {
  it("starts with a zero run and round-trips", () => {
    const mask = rectMask([4, 4], 1, 1, 2, 2);
    const runs = rleEncode(mask);
    expect(runs).toEqual([5, 2, 2, 2, 5]);
    expect(rleDecode(runs, [4, 4]).data).toEqual(mask.data);
  });

  it("encodes an all-ones mask with a leading zero run", () => {
    const mask = rectMask([2, 2], 0, 0, 2, 2);
    expect(rleEncode(mask)).toEqual([0, 4]);
  });

  it("rejects runs that do not cover the mask", () => {
    expect(() => rleDecode([3, 2], [4, 4])).toThrow();
    expect(() => rleDecode([20], [4, 4])).toThrow();
  });

  it("round-trips random masks", () => {
    for (let trial = 0; trial < 20; trial++) {
      const data = new Uint8Array(48);
      for (let i = 0; i < data.length; i++) {
        data[i] = Math.random() < 0.5 ? 1 : 0;
      }
      const mask = new Mask([6, 8], data);
      expect(rleDecode(rleEncode(mask), [6, 8]).data).toEqual(data);
    }
  });
});

describe("stroke masks", () => {
  it("marks pixels along a pen stroke at the chosen width", () => {
    // stroke endpoints are continuous coordinates: pixel centers are +0.5
    const mask = strokeMask([[2.5, 1.5], [2.5, 6.5]], 1, [8, 8]);
    for (let c = 1; c <= 6; c++) expect(mask.get(2, c)).toBe(1);
    expect(mask.get(0, 3)).toBe(0);
    expect(mask.get(5, 3)).toBe(0);
  });

  it("widens symmetrically", () => {
    const thin = strokeMask([[4.5, 1.5], [4.5, 7.5]], 1, [9, 9]);
    const wide = strokeMask([[4.5, 1.5], [4.5, 7.5]], 3, [9, 9]);
    expect(wide.count()).toBeGreaterThan(thin.count());
    expect(wide.get(3, 4)).toBe(1);
    expect(wide.get(5, 4)).toBe(1);
  });

  it("a single point stamps a dab", () => {
    const dab = strokeMask([[3, 3]], 2, [6, 6]);
    expect(dab.count()).toBeGreaterThan(0);
    expect(dab.get(3, 3)).toBe(1);
  });

  it("circle tool fills a disc", () => {
    const disc = circleMask([4, 4], 2.5, [9, 9]);
    expect(disc.get(4, 4)).toBe(1);
    expect(disc.get(4, 2)).toBe(1);
    expect(disc.get(0, 0)).toBe(0);
  });
});
