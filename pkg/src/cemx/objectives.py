"""Differentiable editing objectives.

Every builder appends a scalar objective to a tape, rooted at the node
holding the current output image.  Quantities captured "at job start"
(baseline images, initial patch variances) enter as constants, so gradients
only flow through the current image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.ndimage import zoom as ndi_zoom

from .cem import CemOperator, cem_apply
from .errors import EmptyRegion, EstimationError, InvalidParam
from .imagekit import validate_image, validate_mask
from .tape import Tape

PATCH_SIZE = 6
SOURCE_STRIDE = 2
TARGET_STRIDE = 4
NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1),
                    (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class PatchGrid:
    size: int = PATCH_SIZE
    row_stride: int = 1
    col_stride: int = 1

    def __post_init__(self):
        if self.row_stride < 1 or self.col_stride < 1:
            raise InvalidParam("patch strides must be >= 1")


@dataclass(frozen=True)
class Scribble:
    mask: np.ndarray                    # (H, W) weights in [0, 1]
    kind: str = "color"                 # color | brighten | darken | tv_min
    target: np.ndarray | None = None    # (H, W, C) colors for kind=color
    width: int = 1

    def __post_init__(self):
        if self.kind not in ("color", "brighten", "darken", "tv_min"):
            raise InvalidParam(f"unknown scribble kind {self.kind!r}")


@dataclass
class EditJobSpec:
    tool: str
    region: dict[str, Any] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    steps: int = 50
    step_size: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidParam("steps must be >= 0")


# ---- region helpers ---------------------------------------------------------

def rect_mask(dims: tuple[int, int], r0: int, c0: int, h: int, w: int
              ) -> np.ndarray:
    rows, cols = dims
    if r0 < 0 or c0 < 0 or h < 1 or w < 1 or r0 + h > rows or c0 + w > cols:
        raise InvalidParam(f"rect ({r0},{c0},{h},{w}) outside {dims}")
    m = np.zeros(dims)
    m[r0:r0 + h, c0:c0 + w] = 1.0
    return m


def rasterize_polygon(points, dims: tuple[int, int]) -> np.ndarray:
    """Even-odd fill of a closed polygon, sampled at pixel centers.

    points are (row, col) vertices; the frontend uses the same rule so masks
    round-trip bit-identically.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise InvalidParam("polygon needs at least 3 (row, col) vertices")
    rows, cols = dims
    mask = np.zeros(dims)
    ys = pts[:, 0]
    xs = pts[:, 1]
    n = len(pts)
    cy = np.arange(rows)[:, None] + 0.5
    cx = np.arange(cols)[None, :] + 0.5
    inside = np.zeros(dims, dtype=bool)
    for i in range(n):
        y0, x0 = ys[i], xs[i]
        y1, x1 = ys[(i + 1) % n], xs[(i + 1) % n]
        cond = (y0 <= cy) != (y1 <= cy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (cy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (cx < x_at)
    mask[inside] = 1.0
    return mask


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major binarized mask, starting with zeros."""
    flat = (np.asarray(mask).ravel() >= 0.5).astype(np.int8)
    runs = []
    current, count = 0, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return runs


def rle_decode(runs, dims: tuple[int, int]) -> np.ndarray:
    total = dims[0] * dims[1]
    flat = np.zeros(total)
    pos, val = 0, 0
    for run in runs:
        if run < 0 or pos + run > total:
            raise InvalidParam("run-length data does not fit the mask dims")
        if val:
            flat[pos:pos + run] = 1.0
        pos += run
        val ^= 1
    if pos != total:
        raise InvalidParam("run-length data does not cover the mask")
    return flat.reshape(dims)


def region_to_mask(region: dict[str, Any], dims: tuple[int, int]
                   ) -> np.ndarray:
    if not region:
        return np.ones(dims)
    if "rect" in region:
        return rect_mask(dims, *[int(v) for v in region["rect"]])
    if "polygon" in region:
        return rasterize_polygon(region["polygon"], dims)
    if "rle" in region:
        return rle_decode(region["rle"], dims)
    if "mask" in region:
        m = np.asarray(region["mask"], dtype=np.float64)
        if m.shape != dims:
            raise InvalidParam(f"mask dims {m.shape} != image dims {dims}")
        return m
    raise InvalidParam(f"unrecognized region spec keys {sorted(region)}")


def _mask3(tape: Tape, mask: np.ndarray, channels: int) -> int:
    return tape.constant(np.repeat(mask[:, :, None], channels, axis=2))


def patch_positions(mask: np.ndarray, grid: PatchGrid) -> list[tuple[int, int]]:
    """Top-left corners of patches fully inside the mask's support."""
    binary = mask >= 0.5
    h, w = mask.shape
    out = []
    for r in range(0, h - grid.size + 1, grid.row_stride):
        for c in range(0, w - grid.size + 1, grid.col_stride):
            if binary[r:r + grid.size, c:c + grid.size].all():
                out.append((r, c))
    return out


# ---- patch statistics on the tape ------------------------------------------

def _patch_mean(tape: Tape, patch: int) -> int:
    return tape.reduce_mean(patch)


def _patch_var(tape: Tape, patch: int) -> int:
    m = tape.reduce_mean(patch)
    msq = tape.reduce_mean(tape.mul(patch, patch))
    return tape.sub(msq, tape.mul(m, m))


def _centered(tape: Tape, patch: int) -> int:
    m = _patch_mean(tape, patch)
    ones = tape.constant(np.ones(tape.value(patch).shape))
    return tape.sub(patch, tape.mul(ones, m))


def _sum_nodes(tape: Tape, nodes: list[int]) -> int:
    total = nodes[0]
    for n in nodes[1:]:
        total = tape.add(total, n)
    return total


# ---- objectives -------------------------------------------------------------

def variance_objective(tape: Tape, x_hat: int, region: np.ndarray,
                       delta: float, baseline: np.ndarray,
                       grid: PatchGrid = PatchGrid()) -> int:
    """Sum over patches of (var(p) - (var0(p) + delta))^2, full overlap."""
    baseline = validate_image(baseline)
    positions = patch_positions(validate_mask(region, baseline), grid)
    if not positions:
        raise EmptyRegion("region holds no full patch")
    terms = []
    for r, c in positions:
        p0 = baseline[r:r + grid.size, c:c + grid.size, :]
        target = float(np.var(p0)) + delta
        patch = tape.slice2d(x_hat, r, r + grid.size, c, c + grid.size)
        terms.append(tape.square(tape.sub(_patch_var(tape, patch),
                                          tape.constant(target))))
    return _sum_nodes(tape, terms)


def magnitude_objective(tape: Tape, x_hat: int, region: np.ndarray,
                        factor: float, baseline: np.ndarray) -> int:
    """Scale each patch's mean-removed signal toward factor times its
    job-start signal; 4-row patch subsampling."""
    baseline = validate_image(baseline)
    grid = PatchGrid(row_stride=TARGET_STRIDE, col_stride=1)
    positions = patch_positions(validate_mask(region, baseline), grid)
    if not positions:
        raise EmptyRegion("region holds no full patch")
    terms = []
    for r, c in positions:
        p0 = baseline[r:r + grid.size, c:c + grid.size, :]
        target = factor * (p0 - p0.mean())
        patch = tape.slice2d(x_hat, r, r + grid.size, c, c + grid.size)
        diff = tape.sub(_centered(tape, patch), tape.constant(target))
        terms.append(tape.sq_norm(diff))
    return _sum_nodes(tape, terms)


def scribble_objective(tape: Tape, x_hat: int, scribble: Scribble) -> int:
    if scribble.kind != "color":
        raise InvalidParam(f"scribble_objective needs kind=color, "
                           f"got {scribble.kind}")
    if scribble.target is None:
        raise InvalidParam("color scribble carries no target colors")
    value = tape.value(x_hat)
    mask = validate_mask(scribble.mask, value)
    if mask.sum() <= 0:
        raise EmptyRegion("scribble mask selects no pixels")
    target = validate_image(scribble.target)
    diff = tape.sub(x_hat, tape.constant(target))
    return tape.l1(tape.mul(diff, _mask3(tape, mask, value.shape[2])))


def brightness_objective(tape: Tape, x_hat: int, scribble: Scribble,
                         factor: float, baseline: np.ndarray) -> int:
    if scribble.kind not in ("brighten", "darken"):
        raise InvalidParam("brightness objective needs brighten/darken kind")
    if factor <= 0:
        raise InvalidParam("brightness factor must be positive")
    baseline = validate_image(baseline)
    mask = validate_mask(scribble.mask, baseline)
    if mask.sum() <= 0:
        raise EmptyRegion("scribble mask selects no pixels")
    target = np.clip(baseline * factor, 0.0, 1.0)
    diff = tape.sub(x_hat, tape.constant(target))
    return tape.l1(tape.mul(diff, _mask3(tape, mask, baseline.shape[2])))


def local_tv_objective(tape: Tape, x_hat: int, scribble: Scribble) -> int:
    """8-neighbor absolute differences inside the mask; symmetric pairs are
    counted in both orderings."""
    if scribble.kind != "tv_min":
        raise InvalidParam("local TV objective needs kind=tv_min")
    value = tape.value(x_hat)
    mask = validate_mask(scribble.mask, value)
    if mask.sum() <= 0:
        raise EmptyRegion("scribble mask selects no pixels")
    h, w = mask.shape
    binary = (mask >= 0.5).astype(np.float64)
    terms = []
    for dr, dc in NEIGHBOR_OFFSETS:
        neighbor_mask = np.zeros_like(binary)
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        neighbor_mask[r0:r1, c0:c1] = binary[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        pair = binary * neighbor_mask
        if pair.sum() == 0:
            continue
        shifted = tape.shift(x_hat, -dr, -dc)
        diff = tape.sub(x_hat, shifted)
        terms.append(tape.l1(tape.mul(diff,
                                      _mask3(tape, pair, value.shape[2]))))
    if not terms:
        return tape.constant(0.0)
    return _sum_nodes(tape, terms)


def imprint_baseline(op: CemOperator, y: np.ndarray, x_hat: np.ndarray,
                     content: np.ndarray, rect: tuple[int, int, int, int],
                     offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Paste content into the rect (after the offset nudge), then project.

    The projection makes the imprinted candidate consistent with y; the
    returned image is the optimization target, not the displayed output.
    """
    x_hat = validate_image(x_hat)
    content = validate_image(content)
    r0, c0, hh, ww = (int(v) for v in rect)
    r0 += int(offset[0])
    c0 += int(offset[1])
    if r0 < 0 or c0 < 0 or r0 + hh > x_hat.shape[0] or \
            c0 + ww > x_hat.shape[1]:
        raise InvalidParam(f"imprint rect ({r0},{c0},{hh},{ww}) out of bounds")
    if content.shape[2] != x_hat.shape[2]:
        raise InvalidParam("content channel count differs from image")
    if content.shape[:2] != (hh, ww):
        factors = (hh / content.shape[0], ww / content.shape[1], 1.0)
        content = ndi_zoom(content, factors, order=3, mode="nearest")
        content = content[:hh, :ww, :]
    candidate = x_hat.copy()
    candidate[r0:r0 + hh, c0:c0 + ww, :] = content
    return cem_apply(op, candidate, y)


def imprint_objective(tape: Tape, x_hat: int, baseline: np.ndarray,
                      rect: tuple[int, int, int, int]) -> int:
    baseline = validate_image(baseline)
    mask = rect_mask(baseline.shape[:2], *(int(v) for v in rect))
    diff = tape.sub(x_hat, tape.constant(baseline))
    return tape.l1(tape.mul(diff, _mask3(tape, mask, baseline.shape[2])))


def _extract_patches(img: np.ndarray, mask: np.ndarray, grid: PatchGrid
                     ) -> list[np.ndarray]:
    return [img[r:r + grid.size, c:c + grid.size, :]
            for r, c in patch_positions(mask, grid)]


def patch_collection_objective(tape: Tape, x_hat: int,
                               target_region: np.ndarray,
                               source_patches: list[np.ndarray],
                               variant: str = "plain",
                               baseline: np.ndarray | None = None,
                               var_eps: float = 1e-8) -> int:
    """Pull each target patch toward its nearest mean-removed source patch.

    plain: squared distance between mean-removed patches.
    variance_preserving: match unit-variance signals and separately pin each
    target patch's variance to its job-start value (requires baseline).
    """
    if variant not in ("plain", "variance_preserving"):
        raise InvalidParam(f"unknown patch variant {variant!r}")
    value = tape.value(x_hat)
    grid = PatchGrid(row_stride=TARGET_STRIDE, col_stride=TARGET_STRIDE)
    positions = patch_positions(validate_mask(target_region, value), grid)
    if not positions or not source_patches:
        raise EmptyRegion("need at least one source and one target patch")
    sources = []
    for s in source_patches:
        s = validate_image(s)
        centered = s - s.mean()
        if variant == "variance_preserving":
            centered = centered / np.sqrt(np.var(s) + var_eps)
        sources.append(centered)
    terms = []
    for r, c in positions:
        patch = tape.slice2d(x_hat, r, r + grid.size, c, c + grid.size)
        centered = _centered(tape, patch)
        if variant == "variance_preserving":
            var = _patch_var(tape, patch)
            scale = tape.sqrt(tape.add(var, tape.constant(var_eps)))
            normalized = tape.mul(centered, tape.reciprocal(scale))
            dists = [tape.sq_norm(tape.sub(normalized, tape.constant(s)))
                     for s in sources]
            match = tape.min_select(dists) if len(dists) > 1 else dists[0]
            if baseline is None:
                raise InvalidParam("variance_preserving needs a baseline")
            v0 = float(np.var(baseline[r:r + grid.size, c:c + grid.size, :]))
            keep = tape.square(tape.sub(var, tape.constant(v0)))
            terms.append(tape.add(match, keep))
        else:
            dists = [tape.sq_norm(tape.sub(centered, tape.constant(s)))
                     for s in sources]
            terms.append(tape.min_select(dists) if len(dists) > 1
                         else dists[0])
    return _sum_nodes(tape, terms)


def source_patches_from(img: np.ndarray, region: np.ndarray
                        ) -> list[np.ndarray]:
    grid = PatchGrid(row_stride=SOURCE_STRIDE, col_stride=SOURCE_STRIDE)
    return _extract_patches(validate_image(img), region, grid)


def periodicity_objective(tape: Tape, x_hat: int, region: np.ndarray,
                          directions: list[tuple[int, int]],
                          periods: list[int]) -> int:
    """Penalize the difference between the region and its one-period
    translate, per direction."""
    if not directions or len(directions) > 2:
        raise InvalidParam("need 1 or 2 directions")
    if len(periods) != len(directions):
        raise InvalidParam("one period per direction")
    value = tape.value(x_hat)
    mask = validate_mask(region, value)
    binary = (mask >= 0.5).astype(np.float64)
    h, w = mask.shape
    terms = []
    for (dr, dc), period in zip(directions, periods):
        if period < 1:
            raise InvalidParam("period must be >= 1")
        sr, sc = dr * period, dc * period
        shifted_mask = np.zeros_like(binary)
        r0, r1 = max(0, -sr), min(h, h - sr)
        c0, c1 = max(0, -sc), min(w, w - sc)
        shifted_mask[r0:r1, c0:c1] = binary[r0 + sr:r1 + sr, c0 + sc:c1 + sc]
        overlap = binary * shifted_mask
        if overlap.sum() == 0:
            raise InvalidParam(f"region does not overlap its translate by "
                               f"{(sr, sc)}")
        shifted = tape.shift(x_hat, -sr, -sc)
        diff = tape.sub(x_hat, shifted)
        terms.append(tape.l1(tape.mul(diff,
                                      _mask3(tape, overlap, value.shape[2]))))
    return _sum_nodes(tape, terms)


def estimate_period(x_hat: np.ndarray, region: np.ndarray,
                    direction: tuple[int, int]) -> int:
    """Lag of maximal mean-removed normalized autocorrelation (lags 2..L/2),
    ties broken toward the smallest lag."""
    x_hat = validate_image(x_hat)
    mask = validate_mask(region, x_hat) >= 0.5
    if not mask.any():
        raise EstimationError("empty region")
    dr, dc = direction
    if (dr, dc) not in ((0, 1), (1, 0)):
        raise InvalidParam("direction must be horizontal (0,1) or "
                           "vertical (1,0)")
    lum = x_hat.mean(axis=2)
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    window = lum[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
    if dr == 1:
        window = window.T
    signal = window - window.mean()
    if np.abs(signal).max() < 1e-12:
        raise EstimationError("zero-variance region")
    extent = signal.shape[1]
    max_lag = extent // 2
    if max_lag < 2:
        raise EstimationError("region too small for period search")
    best_lag, best_score = None, -np.inf
    for lag in range(2, max_lag + 1):
        a = signal[:, :-lag].ravel()
        b = signal[:, lag:].ravel()
        denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
        if denom < 1e-15:
            continue
        score = float(np.sum(a * b) / denom)
        if score > best_score + 1e-12:
            best_score, best_lag = score, lag
    if best_lag is None:
        raise EstimationError("degenerate autocorrelation")
    return best_lag


def diversity_objective(tape: Tape, outputs: list[int],
                        anchored_to: np.ndarray | None = None,
                        mu: float = 0.1) -> int:
    """Negative sum of pairwise L1 distances; the anchored variant adds
    mu times the distance of each output to the current image."""
    if len(outputs) < 2:
        raise InvalidParam("diversity needs at least 2 outputs")
    terms = []
    for i in range(len(outputs)):
        for j in range(i + 1, len(outputs)):
            terms.append(tape.l1(tape.sub(outputs[i], outputs[j])))
    total = tape.neg(_sum_nodes(tape, terms))
    if anchored_to is not None:
        anchor = tape.constant(validate_image(anchored_to))
        anchor_terms = [tape.l1(tape.sub(o, anchor)) for o in outputs]
        total = tape.add(total, tape.scale(_sum_nodes(tape, anchor_terms), mu))
    return total
