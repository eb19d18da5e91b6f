"""Image containers, resampling, convolution, Fourier utilities and file I/O.

Images are float64 numpy arrays of shape (height, width, channels), channels
1 or 3, nominal range [0, 1] (out-of-range values are allowed pre-clipping).
Region masks are float64 arrays of shape (height, width) with entries in [0, 1].
"""

from __future__ import annotations

import enum

import numpy as np
from PIL import Image as PilImage
from scipy.signal import convolve2d

from .errors import InvalidDims, IoError


class BoundaryMode(enum.Enum):
    PERIODIC = "periodic"
    REPLICATE = "replicate"


def validate_image(img: np.ndarray, strict_channels: bool = False
                   ) -> np.ndarray:
    """Check the (H, W, C) image contract, returning a float64 view.

    Pixel rasters carried across module boundaries have 1 or 3 channels;
    internal feature stacks may carry more, so the channel restriction is
    only enforced where strict_channels is set (file I/O).
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] < 1:
        raise InvalidDims(f"expected (H, W, C) image, got shape {arr.shape}")
    if strict_channels and arr.shape[2] not in (1, 3):
        raise InvalidDims(f"expected 1 or 3 channels, got {arr.shape[2]}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidDims(f"degenerate image dims {arr.shape}")
    return arr


def validate_mask(mask: np.ndarray, img: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask, dtype=np.float64)
    if arr.shape != img.shape[:2]:
        raise InvalidDims(
            f"mask shape {arr.shape} does not match image {img.shape[:2]}")
    return arr


def _pad_indices(n: int, r: int, mode: BoundaryMode) -> np.ndarray:
    idx = np.arange(-r, n + r)
    if mode is BoundaryMode.PERIODIC:
        return idx % n
    return np.clip(idx, 0, n - 1)


def _conv2d_plane(plane: np.ndarray, taps: np.ndarray,
                  mode: BoundaryMode) -> np.ndarray:
    rr, cc = taps.shape[0] // 2, taps.shape[1] // 2
    ri = _pad_indices(plane.shape[0], rr, mode)
    ci = _pad_indices(plane.shape[1], cc, mode)
    padded = plane[np.ix_(ri, ci)]
    return convolve2d(padded, taps, mode="valid")


def conv2d(img: np.ndarray, taps: np.ndarray,
           mode: BoundaryMode = BoundaryMode.PERIODIC) -> np.ndarray:
    """Same-size 2D convolution with a centered odd-dims kernel."""
    img = validate_image(img)
    taps = np.asarray(taps, dtype=np.float64)
    if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
        raise InvalidDims(f"kernel dims must be odd, got {taps.shape}")
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = _conv2d_plane(img[:, :, c], taps, mode)
    return out


def conv2d_adjoint(grad: np.ndarray, taps: np.ndarray,
                   mode: BoundaryMode) -> np.ndarray:
    """Exact adjoint of conv2d for the given boundary mode.

    Forward is valid-convolution after index padding, so the adjoint is
    full cross-correlation followed by folding the pad strips back onto
    their source pixels.
    """
    grad = validate_image(grad)
    taps = np.asarray(taps, dtype=np.float64)
    rr, cc = taps.shape[0] // 2, taps.shape[1] // 2
    h, w = grad.shape[:2]
    ri = _pad_indices(h, rr, mode)
    ci = _pad_indices(w, cc, mode)
    out = np.zeros_like(grad)
    for c in range(grad.shape[2]):
        full = convolve2d(grad[:, :, c], taps[::-1, ::-1], mode="full")
        np.add.at(out[:, :, c], (ri[:, None], ci[None, :]), full)
    return out


def downsample(img: np.ndarray, alpha: int) -> np.ndarray:
    """Keep samples at indices divisible by alpha."""
    img = validate_image(img)
    if alpha < 1:
        raise InvalidDims(f"alpha must be >= 1, got {alpha}")
    if img.shape[0] % alpha or img.shape[1] % alpha:
        raise InvalidDims(
            f"dims {img.shape[:2]} not divisible by alpha={alpha}")
    return img[::alpha, ::alpha, :].copy()


def upsample(img: np.ndarray, alpha: int) -> np.ndarray:
    """Zero-insertion upsampling: the exact adjoint of downsample."""
    img = validate_image(img)
    if alpha < 1:
        raise InvalidDims(f"alpha must be >= 1, got {alpha}")
    h, w, c = img.shape
    out = np.zeros((h * alpha, w * alpha, c))
    out[::alpha, ::alpha, :] = img
    return out


def fft2(grid: np.ndarray) -> np.ndarray:
    return np.fft.fft2(np.asarray(grid, dtype=complex), axes=(0, 1))


def ifft2(grid: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.asarray(grid, dtype=complex), axes=(0, 1))


def to_bytes(img: np.ndarray) -> np.ndarray:
    img = validate_image(img, strict_channels=True)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_png(path) -> np.ndarray:
    try:
        with PilImage.open(path) as pil:
            if pil.mode not in ("L", "RGB"):
                pil = pil.convert("RGB" if "A" in pil.mode or
                                  pil.mode in ("P", "CMYK") else "L")
            arr = np.asarray(pil, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc
    return validate_image(arr)


def save_png(path, img: np.ndarray) -> None:
    data = to_bytes(img)
    pil = PilImage.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write image {path}: {exc}") from exc


def load_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM reader, dependency-free fixture format."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
        pos += 1  # single whitespace after maxval
        magic, width, height, maxval = (tokens[0], int(tokens[1]),
                                        int(tokens[2]), int(tokens[3]))
        if magic != b"P5" or maxval != 255:
            raise IoError(f"unsupported PGM header in {path}")
        data = np.frombuffer(raw, dtype=np.uint8, count=width * height,
                             offset=pos)
        arr = data.reshape(height, width).astype(np.float64) / 255.0
    except (ValueError, IndexError) as exc:
        raise IoError(f"malformed PGM {path}: {exc}") from exc
    return validate_image(arr)


def save_pgm(path, img: np.ndarray) -> None:
    data = to_bytes(img)
    if data.shape[2] != 1:
        raise InvalidDims("PGM supports single-channel images only")
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data[:, :, 0].tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    p = str(path).lower()
    if p.endswith(".pgm"):
        return load_pgm(path)
    if p.endswith(".npy"):
        # Lossless float container for exact round trips (no quantization).
        try:
            return validate_image(np.load(path))
        except (OSError, ValueError) as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
    return load_png(path)


def save_image(path, img: np.ndarray) -> None:
    p = str(path).lower()
    if p.endswith(".pgm"):
        save_pgm(path, img)
    elif p.endswith(".npy"):
        np.save(path, validate_image(img))
    else:
        save_png(path, img)
