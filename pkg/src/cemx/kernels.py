"""Blur kernels and the Fourier-domain inverse filter used by the projection.

The inverse filter is kept spectrally on the low-resolution grid it is built
for: it has unbounded spatial support in general, and spectral application is
exact circular convolution on that grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import InvalidDims, KernelFormatError, SingularKernel
from .imagekit import fft2, ifft2, validate_image


@dataclass(frozen=True)
class Kernel:
    taps: np.ndarray
    label: str = ""

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.size == 0:
            raise KernelFormatError(f"kernel taps must be 2D, got {taps.shape}")
        if taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            taps = _pad_to_odd(taps)
        object.__setattr__(self, "taps", taps)

    @property
    def rows(self) -> int:
        return self.taps.shape[0]

    @property
    def cols(self) -> int:
        return self.taps.shape[1]

    def normalized(self) -> "Kernel":
        s = self.taps.sum()
        if abs(s) < 1e-300:
            raise SingularKernel("kernel taps sum to zero, cannot normalize")
        return Kernel(self.taps / s, self.label)


def _pad_to_odd(taps: np.ndarray) -> np.ndarray:
    # Even-support kernels get one zero row/column on the high side so the
    # anchor sits at the array center.
    pr = 1 - taps.shape[0] % 2
    pc = 1 - taps.shape[1] % 2
    return np.pad(taps, ((0, pr), (0, pc)))


@dataclass(frozen=True)
class InvFilter:
    spectrum: np.ndarray          # complex raster on the LR grid
    eps: float                    # relative regularization floor used
    floored_bins: int = 0

    @property
    def grid_rows(self) -> int:
        return self.spectrum.shape[0]

    @property
    def grid_cols(self) -> int:
        return self.spectrum.shape[1]


def delta_kernel(size: int = 1) -> Kernel:
    taps = np.zeros((size if size % 2 else size + 1,) * 2)
    taps[taps.shape[0] // 2, taps.shape[1] // 2] = 1.0
    return Kernel(taps, "delta")


def mirror(h: Kernel) -> Kernel:
    """180-degree rotation of the taps."""
    return Kernel(h.taps[::-1, ::-1].copy(), h.label)


def _keys_cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.where(t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
                   np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a,
                            0.0))
    return out


def bicubic_kernel(alpha: int) -> Kernel:
    """Separable Keys-cubic anti-aliasing kernel for decimation by alpha."""
    if alpha < 1:
        raise InvalidDims(f"alpha must be >= 1, got {alpha}")
    radius = 2 * alpha - 1
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    taps1d = _keys_cubic(t / alpha)
    taps = np.outer(taps1d, taps1d)
    return Kernel(taps / taps.sum(), f"bicubic-x{alpha}")


def bicubic_interp_kernel(alpha: int) -> Kernel:
    """Interpolating cubic for zero-insertion upsampling (per-phase sum 1)."""
    if alpha < 1:
        raise InvalidDims(f"alpha must be >= 1, got {alpha}")
    radius = 2 * alpha - 1
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    taps1d = _keys_cubic(t / alpha)
    return Kernel(np.outer(taps1d, taps1d), f"bicubic-interp-x{alpha}")


def gaussian_kernel(sigma: float, radius: int | None = None) -> Kernel:
    if radius is None:
        radius = max(1, int(np.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    taps = np.outer(g, g)
    return Kernel(taps / taps.sum(), f"gauss-{sigma:g}")


def autocorrelation(h: Kernel) -> np.ndarray:
    """Full (h * mirror(h)) taps; odd-dims, centered, symmetric."""
    return convolve2d(h.taps, h.taps[::-1, ::-1], mode="full")


def compose_downsampled(h: Kernel, alpha: int,
                        grid_dims: tuple[int, int]) -> np.ndarray:
    """(h * h~) embedded on the periodic HR grid, decimated to the LR grid.

    grid_dims are the LR dims; index 0 of the result is the filter origin.
    """
    gr, gc = grid_dims
    auto = autocorrelation(h)
    hr_r, hr_c = gr * alpha, gc * alpha
    if hr_r < h.rows or hr_c < h.cols:
        raise InvalidDims(
            f"grid {grid_dims} too small for kernel support "
            f"{(h.rows, h.cols)}")
    embed = np.zeros((hr_r, hr_c))
    cr, cc = auto.shape[0] // 2, auto.shape[1] // 2
    rows = (np.arange(auto.shape[0]) - cr) % hr_r
    cols = (np.arange(auto.shape[1]) - cc) % hr_c
    # The autocorrelation may exceed the grid; periodic wrap-around keeps
    # the circular-operator algebra exact, so contributions accumulate.
    np.add.at(embed, (rows[:, None], cols[None, :]), auto)
    return embed[::alpha, ::alpha]


def invert_composed(h: Kernel, alpha: int, grid_dims: tuple[int, int],
                    eps: float = 1e-10) -> InvFilter:
    """Spectral inverse of (h * h~) decimated by alpha, on the LR grid.

    Bins with magnitude below eps * max|F| are floored: their magnitude is
    replaced by the floor, preserving sign, and the count recorded.
    """
    g = compose_downsampled(h, alpha, grid_dims)
    spec = fft2(g)
    # Autocorrelation spectrum is real and non-negative up to roundoff.
    leak = np.abs(spec.imag).max()
    if leak > 1e-10 * max(1.0, np.abs(spec.real).max()):
        raise SingularKernel(f"unexpected imaginary leakage {leak:g}")
    real = spec.real
    peak = np.abs(real).max()
    if peak <= 0.0:
        raise SingularKernel("composed filter has an all-zero spectrum")
    floor = eps * peak
    small = np.abs(real) < floor
    safe = np.where(small, np.where(real < 0, -floor, floor), real)
    inv = 1.0 / safe
    return InvFilter(inv.astype(complex), eps, int(small.sum()))


def apply_inv(f: InvFilter, img: np.ndarray) -> np.ndarray:
    """Circular convolution with the inverse filter via its spectrum."""
    img = validate_image(img)
    if img.shape[:2] != f.spectrum.shape:
        raise InvalidDims(
            f"image dims {img.shape[:2]} != filter grid {f.spectrum.shape}")
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ifft2(fft2(img[:, :, c]) * f.spectrum).real
    return out


def save_kernel(path, h: Kernel) -> None:
    doc = {"rows": h.rows, "cols": h.cols,
           "taps": h.taps.ravel().tolist(), "label": h.label}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def kernel_from_doc(doc, normalize: bool = True) -> Kernel:
    try:
        rows, cols = int(doc["rows"]), int(doc["cols"])
        taps = np.asarray(doc["taps"], dtype=np.float64).reshape(rows, cols)
    except (KeyError, ValueError, TypeError) as exc:
        raise KernelFormatError(f"malformed kernel document: {exc}") from exc
    if taps.size == 0:
        raise KernelFormatError("kernel document has empty taps")
    k = Kernel(taps, str(doc.get("label", "")))
    return k.normalized() if normalize else k


def load_kernel(path, normalize: bool = True) -> Kernel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise KernelFormatError(f"malformed kernel file {path}: {exc}") from exc
    return kernel_from_doc(doc, normalize)
