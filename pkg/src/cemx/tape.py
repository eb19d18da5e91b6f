"""Minimal reverse-mode differentiation over the image-operator vocabulary.

A Tape is an append-only list of nodes; append order is the topological
order.  Values are computed eagerly when a node is added; forward() can
recompute the whole tape after leaf values change (used by the finite
difference checker).  Image values are (H, W, C) float64 arrays, reductions
produce python floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .cem import CemOperator, project_nullspace
from .errors import GraphShapeError
from .imagekit import BoundaryMode, conv2d, conv2d_adjoint, downsample, upsample


@dataclass
class Node:
    op: str
    inputs: list[int]
    payload: dict[str, Any]
    value: Any = None
    grad: Any = None
    requires_grad: bool = False


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def _add(self, op, inputs, payload) -> int:
        node = Node(op, list(inputs), payload)
        node.requires_grad = (op == "leaf" and payload.get("marked", False)) or \
            any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        self._eval(nid)
        return nid

    def value(self, nid: int):
        return self.nodes[nid].value

    def grad(self, nid: int):
        return self.nodes[nid].grad

    # ---- graph construction -------------------------------------------------

    def leaf(self, value, marked: bool = False) -> int:
        return self._add("leaf", [], {"init": _as_value(value),
                                      "marked": marked})

    def constant(self, value) -> int:
        return self.leaf(value, marked=False)

    def add(self, a: int, b: int) -> int:
        return self._add("add", [a, b], {})

    def sub(self, a: int, b: int) -> int:
        return self._add("sub", [a, b], {})

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", [a, b], {})

    def scale(self, a: int, c: float) -> int:
        return self._add("scale", [a], {"c": float(c)})

    def neg(self, a: int) -> int:
        return self.scale(a, -1.0)

    def conv2d(self, a: int, taps: np.ndarray,
               mode: BoundaryMode = BoundaryMode.PERIODIC) -> int:
        return self._add("conv2d", [a], {"taps": np.asarray(taps, float),
                                         "mode": mode})

    def conv2d_param(self, a: int, taps: int,
                     mode: BoundaryMode = BoundaryMode.PERIODIC) -> int:
        """Convolution whose taps are themselves a (kh, kw, 1) tape node."""
        return self._add("conv2d_param", [a, taps], {"mode": mode})

    def downsample(self, a: int, alpha: int) -> int:
        return self._add("downsample", [a], {"alpha": int(alpha)})

    def upsample(self, a: int, alpha: int) -> int:
        return self._add("upsample", [a], {"alpha": int(alpha)})

    def avgpool(self, a: int, alpha: int) -> int:
        return self._add("avgpool", [a], {"alpha": int(alpha)})

    def cem_linear(self, a: int, op: CemOperator) -> int:
        return self._add("cem_linear", [a], {"op": op})

    def leaky_relu(self, a: int, slope: float = 0.2) -> int:
        return self._add("leaky_relu", [a], {"slope": float(slope)})

    def clip_st(self, a: int) -> int:
        return self._add("clip_st", [a], {})

    def concat_channels(self, ids: list[int]) -> int:
        return self._add("concat", list(ids), {})

    def channel(self, a: int, c: int) -> int:
        return self._add("channel", [a], {"c": int(c)})

    def slice2d(self, a: int, r0: int, r1: int, c0: int, c1: int) -> int:
        return self._add("slice2d", [a], {"box": (r0, r1, c0, c1)})

    def shift(self, a: int, dr: int, dc: int) -> int:
        """Circular shift: out[i, j] = in[i - dr, j - dc]."""
        return self._add("shift", [a], {"dr": int(dr), "dc": int(dc)})

    def reduce_sum(self, a: int) -> int:
        return self._add("reduce_sum", [a], {})

    def reduce_mean(self, a: int) -> int:
        return self._add("reduce_mean", [a], {})

    def absolute(self, a: int) -> int:
        return self._add("abs", [a], {})

    def square(self, a: int) -> int:
        return self._add("square", [a], {})

    def sqrt(self, a: int) -> int:
        return self._add("sqrt", [a], {})

    def reciprocal(self, a: int) -> int:
        return self._add("reciprocal", [a], {})

    def min_select(self, ids: list[int]) -> int:
        """Min over scalar inputs; gradient flows to the forward-time argmin,
        ties broken by lowest index."""
        return self._add("min_select", list(ids), {})

    # ---- helpers over scalars ----------------------------------------------

    def l1(self, a: int) -> int:
        return self.reduce_sum(self.absolute(a))

    def mean_l1(self, a: int) -> int:
        return self.reduce_mean(self.absolute(a))

    def sq_norm(self, a: int) -> int:
        return self.reduce_sum(self.square(a))

    def set_leaf(self, nid: int, value) -> None:
        if self.nodes[nid].op != "leaf":
            raise GraphShapeError("set_leaf on a non-leaf node")
        self.nodes[nid].payload["init"] = _as_value(value)

    # ---- evaluation ---------------------------------------------------------

    def forward(self, root: int | None = None):
        for nid in range(len(self.nodes)):
            self._eval(nid)
        return self.nodes[root].value if root is not None else None

    def _eval(self, nid: int) -> None:
        node = self.nodes[nid]
        vals = [self.nodes[i].value for i in node.inputs]
        p = node.payload
        op = node.op
        try:
            if op == "leaf":
                node.value = p["init"]
            elif op == "add":
                node.value = _binary(vals[0], vals[1], np.add)
            elif op == "sub":
                node.value = _binary(vals[0], vals[1], np.subtract)
            elif op == "mul":
                node.value = _binary(vals[0], vals[1], np.multiply)
            elif op == "scale":
                node.value = vals[0] * p["c"]
            elif op == "conv2d":
                node.value = conv2d(vals[0], p["taps"], p["mode"])
            elif op == "conv2d_param":
                node.value = conv2d(vals[0], vals[1][:, :, 0], p["mode"])
            elif op == "downsample":
                node.value = downsample(vals[0], p["alpha"])
            elif op == "upsample":
                node.value = upsample(vals[0], p["alpha"])
            elif op == "avgpool":
                a = p["alpha"]
                v = vals[0]
                h, w, c = v.shape
                node.value = v.reshape(h // a, a, w // a, a, c).mean(axis=(1, 3))
            elif op == "cem_linear":
                node.value = project_nullspace(p["op"], vals[0])
            elif op == "leaky_relu":
                v = vals[0]
                node.value = np.where(v > 0, v, p["slope"] * v)
            elif op == "clip_st":
                node.value = np.clip(vals[0], 0.0, 1.0)
            elif op == "concat":
                node.value = np.concatenate(vals, axis=2)
            elif op == "channel":
                node.value = vals[0][:, :, p["c"]:p["c"] + 1]
            elif op == "slice2d":
                r0, r1, c0, c1 = p["box"]
                node.value = vals[0][r0:r1, c0:c1, :]
            elif op == "shift":
                node.value = np.roll(vals[0], (p["dr"], p["dc"]), axis=(0, 1))
            elif op == "reduce_sum":
                node.value = float(np.sum(vals[0]))
            elif op == "reduce_mean":
                node.value = float(np.mean(vals[0]))
            elif op == "abs":
                node.value = np.abs(vals[0]) if isinstance(vals[0], np.ndarray) \
                    else abs(vals[0])
            elif op == "square":
                node.value = vals[0] * vals[0]
            elif op == "sqrt":
                node.value = np.sqrt(vals[0])
            elif op == "reciprocal":
                node.value = 1.0 / vals[0]
            elif op == "min_select":
                scalars = [float(v) for v in vals]
                k = int(np.argmin(scalars))
                node.value = scalars[k]
                p["argmin"] = k
            else:
                raise GraphShapeError(f"unknown op {op}")
        except (ValueError, IndexError) as exc:
            raise GraphShapeError(f"shape error at node {nid} ({op}): {exc}") \
                from exc

    # ---- backward -----------------------------------------------------------

    def backward(self, root: int) -> None:
        rv = self.nodes[root].value
        if isinstance(rv, np.ndarray):
            raise GraphShapeError("backward root must be scalar-valued")
        for node in self.nodes:
            node.grad = None
        self.nodes[root].grad = 1.0
        for nid in range(root, -1, -1):
            node = self.nodes[nid]
            if node.grad is None or not node.requires_grad:
                continue
            self._propagate(nid)

    def _accumulate(self, nid: int, g) -> None:
        node = self.nodes[nid]
        if not node.requires_grad:
            return
        if node.grad is None:
            node.grad = np.array(g, dtype=float) if isinstance(g, np.ndarray) \
                else g
        else:
            node.grad = node.grad + g

    def _propagate(self, nid: int) -> None:
        node = self.nodes[nid]
        g = node.grad
        vals = [self.nodes[i].value for i in node.inputs]
        p = node.payload
        op = node.op
        if op == "leaf":
            return
        if op == "add":
            self._accumulate(node.inputs[0], _unbroadcast(g, vals[0]))
            self._accumulate(node.inputs[1], _unbroadcast(g, vals[1]))
        elif op == "sub":
            self._accumulate(node.inputs[0], _unbroadcast(g, vals[0]))
            self._accumulate(node.inputs[1], _unbroadcast(-g, vals[1]))
        elif op == "mul":
            self._accumulate(node.inputs[0], _unbroadcast(g * vals[1], vals[0]))
            self._accumulate(node.inputs[1], _unbroadcast(g * vals[0], vals[1]))
        elif op == "scale":
            self._accumulate(node.inputs[0], g * p["c"])
        elif op == "conv2d":
            self._accumulate(node.inputs[0],
                             conv2d_adjoint(g, p["taps"], p["mode"]))
        elif op == "conv2d_param":
            taps = vals[1][:, :, 0]
            self._accumulate(node.inputs[0],
                             conv2d_adjoint(g, taps, p["mode"]))
            self._accumulate(node.inputs[1],
                             _conv_taps_grad(vals[0], g, taps.shape, p["mode"]))
        elif op == "downsample":
            self._accumulate(node.inputs[0], upsample(g, p["alpha"]))
        elif op == "upsample":
            self._accumulate(node.inputs[0], downsample(g, p["alpha"]))
        elif op == "avgpool":
            a = p["alpha"]
            spread = np.repeat(np.repeat(g, a, axis=0), a, axis=1) / (a * a)
            self._accumulate(node.inputs[0], spread)
        elif op == "cem_linear":
            self._accumulate(node.inputs[0], project_nullspace(p["op"], g))
        elif op == "leaky_relu":
            mask = np.where(vals[0] > 0, 1.0, p["slope"])
            self._accumulate(node.inputs[0], g * mask)
        elif op == "clip_st":
            # Straight-through: pass the gradient inside [0, 1], zero outside.
            inside = (vals[0] >= 0.0) & (vals[0] <= 1.0)
            self._accumulate(node.inputs[0], g * inside)
        elif op == "concat":
            off = 0
            for i, v in zip(node.inputs, vals):
                c = v.shape[2]
                self._accumulate(i, g[:, :, off:off + c])
                off += c
        elif op == "channel":
            gz = np.zeros_like(vals[0])
            gz[:, :, p["c"]:p["c"] + 1] = g
            self._accumulate(node.inputs[0], gz)
        elif op == "slice2d":
            r0, r1, c0, c1 = p["box"]
            gz = np.zeros_like(vals[0])
            gz[r0:r1, c0:c1, :] = g
            self._accumulate(node.inputs[0], gz)
        elif op == "shift":
            self._accumulate(node.inputs[0],
                             np.roll(g, (-p["dr"], -p["dc"]), axis=(0, 1)))
        elif op == "reduce_sum":
            self._accumulate(node.inputs[0], g * np.ones_like(vals[0]))
        elif op == "reduce_mean":
            self._accumulate(node.inputs[0],
                             g * np.ones_like(vals[0]) / np.size(vals[0]))
        elif op == "abs":
            self._accumulate(node.inputs[0], g * np.sign(vals[0]))
        elif op == "square":
            self._accumulate(node.inputs[0], g * 2.0 * vals[0])
        elif op == "sqrt":
            denom = np.maximum(np.sqrt(vals[0]), 1e-12) \
                if isinstance(vals[0], np.ndarray) else max(vals[0] ** 0.5, 1e-12)
            self._accumulate(node.inputs[0], g * 0.5 / denom)
        elif op == "reciprocal":
            self._accumulate(node.inputs[0], -g / (vals[0] * vals[0]))
        elif op == "min_select":
            self._accumulate(node.inputs[p["argmin"]], g)
        else:
            raise GraphShapeError(f"unknown op {op}")


def _as_value(v):
    if isinstance(v, np.ndarray):
        return np.asarray(v, dtype=np.float64)
    return float(v)


def _binary(a, b, fn):
    a_arr, b_arr = isinstance(a, np.ndarray), isinstance(b, np.ndarray)
    if a_arr and b_arr and a.shape != b.shape:
        raise GraphShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    out = fn(a, b)
    return out if isinstance(out, np.ndarray) else float(out)


def _unbroadcast(g, operand):
    if isinstance(operand, np.ndarray):
        return g
    return float(np.sum(g))


def _conv_taps_grad(x: np.ndarray, g: np.ndarray, shape: tuple[int, int],
                    mode: BoundaryMode) -> np.ndarray:
    """Gradient of same-size conv w.r.t. its taps: windowed correlations."""
    from .imagekit import _pad_indices  # shares the boundary convention
    kh, kw = shape
    rr, cc = kh // 2, kw // 2
    ri = _pad_indices(x.shape[0], rr, mode)
    ci = _pad_indices(x.shape[1], cc, mode)
    out = np.zeros((kh, kw, 1))
    for c in range(x.shape[2]):
        xp = x[:, :, c][np.ix_(ri, ci)]
        for i in range(kh):
            for j in range(kw):
                m, n = i - rr, j - cc
                window = xp[rr - m:rr - m + x.shape[0],
                            cc - n:cc - n + x.shape[1]]
                out[i, j, 0] += np.sum(g[:, :, c] * window)
    return out


def grad_check(builder, leaf_value: np.ndarray, step: float = 1e-5,
               tol: float = 1e-4) -> dict:
    """Compare analytic gradients against central finite differences.

    builder(tape, leaf_id) must append a scalar objective and return its id.
    Relative error per coordinate uses max(|analytic|, |numeric|, 1) as the
    denominator so flat regions do not blow up the ratio.
    """
    leaf_value = np.asarray(leaf_value, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(leaf_value, marked=True)
    root = builder(tape, leaf)
    tape.backward(root)
    raw = tape.grad(leaf)
    analytic = np.zeros_like(leaf_value) if raw is None \
        else np.array(raw, dtype=float)
    if analytic.shape != leaf_value.shape:
        analytic = np.broadcast_to(analytic, leaf_value.shape).copy()
    numeric = np.zeros_like(leaf_value)
    flat = leaf_value.ravel()
    for k in range(flat.size):
        for sgn, slot in ((1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[k] += sgn * step
            tape.set_leaf(leaf, bumped.reshape(leaf_value.shape))
            val = tape.forward(root)
            if slot == 0:
                plus = val
            else:
                minus = val
        numeric.ravel()[k] = (plus - minus) / (2 * step)
    tape.set_leaf(leaf, leaf_value)
    tape.forward()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    return {"max_rel_error": float(rel.max()), "passed": bool(rel.max() <= tol),
            "analytic": analytic, "numeric": numeric}
