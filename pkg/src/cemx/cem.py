"""Consistency-enforcing projection onto {x : degrade(x) = y}.

The conv-form operator realizes the orthogonal projection
x_hat = (I - Ht (H Ht)^-1 H) x_inc + Ht (H Ht)^-1 y
with convolutions, decimation and zero-insertion only.  A dense-matrix
oracle over tiny grids provides the independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidDims, OracleTooLarge
from .imagekit import (BoundaryMode, conv2d, downsample, upsample,
                       validate_image)
from .kernels import InvFilter, Kernel, apply_inv, invert_composed, mirror

DENSE_ORACLE_MAX_SIDE = 16


@dataclass(frozen=True)
class CemOperator:
    h: Kernel
    h_mirror: Kernel
    inv: InvFilter          # sized for the LR grid (padded grid in Replicate)
    alpha: int
    hr_dims: tuple[int, int]
    boundary: BoundaryMode
    pad_lr: int = 10

    @property
    def lr_dims(self) -> tuple[int, int]:
        return (self.hr_dims[0] // self.alpha, self.hr_dims[1] // self.alpha)

    @property
    def crop_hr(self) -> int:
        return self.pad_lr * self.alpha


def build_cem(h: Kernel, alpha: int, hr_dims: tuple[int, int],
              boundary: BoundaryMode = BoundaryMode.PERIODIC,
              pad_lr: int = 10, eps: float = 1e-10) -> CemOperator:
    hr_r, hr_c = hr_dims
    if hr_r % alpha or hr_c % alpha:
        raise InvalidDims(f"HR dims {hr_dims} not divisible by alpha={alpha}")
    grid = (hr_r // alpha, hr_c // alpha)
    if boundary is BoundaryMode.REPLICATE:
        grid = (grid[0] + 2 * pad_lr, grid[1] + 2 * pad_lr)
    inv = invert_composed(h, alpha, grid, eps)
    return CemOperator(h, mirror(h), inv, alpha, tuple(hr_dims), boundary,
                       pad_lr)


def swap_kernel(op: CemOperator, h_new: Kernel) -> CemOperator:
    inv = invert_composed(h_new, op.alpha,
                          (op.inv.grid_rows, op.inv.grid_cols), op.inv.eps)
    return replace(op, h=h_new, h_mirror=mirror(h_new), inv=inv)


def _check_hr(op: CemOperator, img: np.ndarray) -> np.ndarray:
    img = validate_image(img)
    if img.shape[:2] != op.hr_dims:
        raise InvalidDims(f"expected HR dims {op.hr_dims}, got {img.shape[:2]}")
    return img


def degrade(op: CemOperator, x: np.ndarray) -> np.ndarray:
    """y = (h * x) decimated by alpha under the operator's boundary mode."""
    x = _check_hr(op, x)
    return downsample(conv2d(x, op.h.taps, op.boundary), op.alpha)


def _perp_representative(op: CemOperator, v: np.ndarray) -> np.ndarray:
    """h~ * (k * v) upsampled: the row-space representative of an LR image."""
    return conv2d(upsample(apply_inv(op.inv, v), op.alpha),
                  op.h_mirror.taps, op.boundary)


def _pad_hr(op: CemOperator, u: np.ndarray):
    ph = op.crop_hr
    u_pad = np.pad(u, ((ph, ph), (ph, ph), (0, 0)), mode="edge")
    return u_pad, replace(op, hr_dims=(u_pad.shape[0], u_pad.shape[1]))


def project_nullspace(op: CemOperator, u: np.ndarray) -> np.ndarray:
    """P_N u = u - h~ * [k * (h * u) down] up."""
    u = _check_hr(op, u)
    if op.boundary is BoundaryMode.REPLICATE:
        ph = op.crop_hr
        u_pad, padded_op = _pad_hr(op, u)
        out = u_pad - _perp_representative(padded_op, degrade(padded_op, u_pad))
        return out[ph:-ph, ph:-ph, :]
    return u - _perp_representative(op, degrade(op, u))


def project_perp(op: CemOperator, u: np.ndarray) -> np.ndarray:
    u = _check_hr(op, u)
    if op.boundary is BoundaryMode.REPLICATE:
        ph = op.crop_hr
        u_pad, padded_op = _pad_hr(op, u)
        out = _perp_representative(padded_op, degrade(padded_op, u_pad))
        return out[ph:-ph, ph:-ph, :]
    return _perp_representative(op, degrade(op, u))


def cem_adjoint(op: CemOperator, u: np.ndarray) -> np.ndarray:
    """Adjoint of the x_inc-linear part; P_N is an orthogonal projector."""
    return project_nullspace(op, u)


def cem_apply(op: CemOperator, x_inc: np.ndarray,
              y: np.ndarray) -> np.ndarray:
    """Project x_inc onto the consistent set of y."""
    x_inc = _check_hr(op, x_inc)
    y = validate_image(y)
    if y.shape[:2] != op.lr_dims:
        raise InvalidDims(f"expected LR dims {op.lr_dims}, got {y.shape[:2]}")
    if y.shape[2] != x_inc.shape[2]:
        raise InvalidDims("x_inc and y channel counts differ")
    if op.boundary is BoundaryMode.REPLICATE:
        return _cem_apply_on_grid(op, x_inc, y)
    return project_nullspace(op, x_inc) + _perp_representative(op, y)


def _cem_apply_on_grid(op: CemOperator, x_inc: np.ndarray,
                       y: np.ndarray) -> np.ndarray:
    """Replicate-mode apply: pad, project on the padded grid, crop back."""
    p, ph = op.pad_lr, op.crop_hr
    y_pad = np.pad(y, ((p, p), (p, p), (0, 0)), mode="edge")
    x_pad, padded_op = _pad_hr(op, x_inc)
    out = (x_pad - _perp_representative(padded_op, degrade(padded_op, x_pad))
           + _perp_representative(padded_op, y_pad))
    return out[ph:-ph, ph:-ph, :]


def cem_apply_padded(op: CemOperator, x_inc: np.ndarray,
                     y: np.ndarray) -> np.ndarray:
    """Boundary-safe apply: replicate-pad the LR image, crop the HR result.

    The returned image has the operator's HR dims; the crop removes exactly
    the padding band, whose pixels would otherwise carry boundary garbage.
    """
    if op.boundary is not BoundaryMode.REPLICATE:
        op = build_cem(op.h, op.alpha, op.hr_dims, BoundaryMode.REPLICATE,
                       op.pad_lr, op.inv.eps)
    return cem_apply(op, x_inc, y)


@dataclass(frozen=True)
class DenseOracle:
    H: np.ndarray
    Pperp: np.ndarray
    PN: np.ndarray


def build_dense_oracle(h: Kernel, alpha: int,
                       hr_dims: tuple[int, int]) -> DenseOracle:
    """Explicit H, P_perp and P_N on a tiny periodic grid."""
    hr_r, hr_c = hr_dims
    if hr_r > DENSE_ORACLE_MAX_SIDE or hr_c > DENSE_ORACLE_MAX_SIDE:
        raise OracleTooLarge(f"dense oracle capped at "
                             f"{DENSE_ORACLE_MAX_SIDE}x{DENSE_ORACLE_MAX_SIDE}")
    if hr_r % alpha or hr_c % alpha:
        raise InvalidDims(f"HR dims {hr_dims} not divisible by alpha={alpha}")
    n = hr_r * hr_c
    cols = []
    for i in range(n):
        e = np.zeros((hr_r, hr_c, 1))
        e[i // hr_c, i % hr_c, 0] = 1.0
        ye = downsample(conv2d(e, h.taps, BoundaryMode.PERIODIC), alpha)
        cols.append(ye.ravel())
    H = np.stack(cols, axis=1)
    gram = H @ H.T
    Pperp = H.T @ np.linalg.solve(gram, H)
    PN = np.eye(n) - Pperp
    return DenseOracle(H, Pperp, PN)


def consistency_residual(op: CemOperator, x_hat: np.ndarray,
                         y: np.ndarray) -> tuple[float, float]:
    """(L-inf, RMS) residual of degrade(x_hat) against y."""
    diff = degrade(op, x_hat) - validate_image(y)
    return float(np.abs(diff).max()), float(np.sqrt(np.mean(diff ** 2)))
