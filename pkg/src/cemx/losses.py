"""Training loss suite: range penalty, structure-tensor loss, latent-coverage
loss, and the toy adversarial pieces with the critic credibility gate.

The critic is a single linear functional D(x) = <w, x> + b.  Its input
gradient is w everywhere, which makes the gradient penalty exact without any
second-order differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cem import CemOperator, cem_apply
from .errors import CalibrationError, EmptyRegion, InvalidParam
from .generator import GeneratorParams, generate_on_tape, make_control_signal
from .imagekit import BoundaryMode, conv2d, validate_image, validate_mask
from .tape import Tape

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
DX_TAPS = np.array([[0.0, 0.0, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.0, 0.0]])
DY_TAPS = DX_TAPS.T.copy()


@dataclass(frozen=True)
class LossWeights:
    lambda_range: float = 5000.0
    lambda_struct: float = 1.0
    lambda_map: float = 100.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name in ("lambda_range", "lambda_struct", "lambda_map",
                     "lambda_gp"):
            if getattr(self, name) < 0:
                raise InvalidParam(f"{name} must be >= 0")


@dataclass(frozen=True)
class StructureTensor:
    s11: float
    s12: float
    s22: float

    def entries(self) -> np.ndarray:
        return np.array([self.s11, self.s12, self.s22])


@dataclass(frozen=True)
class PercentileCalibration:
    """Per-entry (P5, P95) of normalized tensor entries, order s11, s12, s22."""
    p5: np.ndarray
    p95: np.ndarray

    def __post_init__(self):
        p5 = np.asarray(self.p5, dtype=np.float64)
        p95 = np.asarray(self.p95, dtype=np.float64)
        if p5.shape != (3,) or p95.shape != (3,):
            raise InvalidParam("calibration needs three (P5, P95) pairs")
        if np.any(p5 > p95):
            raise InvalidParam("P5 must not exceed P95")
        object.__setattr__(self, "p5", p5)
        object.__setattr__(self, "p95", p95)


IDENTITY_CALIBRATION = PercentileCalibration(np.full(3, -1.0), np.full(3, 1.0))


# ---- range loss -------------------------------------------------------------

def range_loss(x_hat: np.ndarray) -> float:
    x_hat = validate_image(x_hat)
    return float(np.mean(np.abs(x_hat - np.clip(x_hat, 0.0, 1.0))))


def range_loss_on_tape(tape: Tape, x_hat: int) -> int:
    return tape.mean_l1(tape.sub(x_hat, tape.clip_st(x_hat)))


# ---- structure tensors ------------------------------------------------------

def luma(img: np.ndarray) -> np.ndarray:
    img = validate_image(img)
    if img.shape[2] == 1:
        return img
    w = np.asarray(LUMA_WEIGHTS)
    return (img[:, :, :3] * w).sum(axis=2, keepdims=True)


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicate boundary on the luma plane."""
    lum = luma(img)
    gx = conv2d(lum, DX_TAPS, BoundaryMode.REPLICATE)[:, :, 0]
    gy = conv2d(lum, DY_TAPS, BoundaryMode.REPLICATE)[:, :, 0]
    return gx, gy


def compute_st(x_hat: np.ndarray, region: np.ndarray | None = None
               ) -> StructureTensor:
    x_hat = validate_image(x_hat)
    if region is None:
        region = np.ones(x_hat.shape[:2])
    region = validate_mask(region, x_hat)
    if region.sum() <= 0:
        raise EmptyRegion("structure tensor over an empty region")
    gx, gy = _gradients(x_hat)
    return StructureTensor(float(np.sum(region * gx * gx)),
                           float(np.sum(region * gx * gy)),
                           float(np.sum(region * gy * gy)))


def st_orientation(s: StructureTensor) -> tuple[float, float, float]:
    """(lambda1, lambda2, theta) of the dominant eigenvector."""
    m = np.array([[s.s11, s.s12], [s.s12, s.s22]])
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    v = vecs[:, order[0]]
    return float(vals[order[0]]), float(vals[order[1]]), \
        float(np.arctan2(v[1], v[0]) % np.pi)


def compose_sd(lam1: float, lam2: float, theta: float,
               mode: str = "paper") -> StructureTensor:
    """Desired tensor from (magnitudes, orientation).

    "paper" uses the printed off-diagonal lam1*lam2*sin*cos; "eigen" is the
    rotation-diagonal form with off-diagonal (lam1-lam2)*sin*cos.  Both ship
    because the two disagree except in special cases.
    """
    if not (0.0 <= lam1 <= 1.0 and 0.0 <= lam2 <= 1.0):
        raise InvalidParam("lambda values must lie in [0, 1]")
    if not (0.0 <= theta <= 2 * np.pi):
        raise InvalidParam("theta must lie in [0, 2*pi]")
    c, s = np.cos(theta), np.sin(theta)
    s11 = lam1 * c * c + lam2 * s * s
    s22 = lam1 * s * s + lam2 * c * c
    if mode == "paper":
        s12 = lam1 * lam2 * s * c
    elif mode == "eigen":
        s12 = (lam1 - lam2) * s * c
    else:
        raise InvalidParam(f"unknown compose mode {mode!r}")
    return StructureTensor(float(s11), float(s12), float(s22))


def st_normalizer(x: np.ndarray) -> float:
    """Sum of |hx * hy| over the reference image, floored at 1e-12."""
    gx, gy = _gradients(x)
    return max(float(np.sum(np.abs(gx * gy))), 1e-12)


def normalize_st(s: StructureTensor, x: np.ndarray) -> StructureTensor:
    d = st_normalizer(x)
    return StructureTensor(s.s11 / d, s.s12 / d, s.s22 / d)


def adjust_sd(sd: StructureTensor, cal: PercentileCalibration
              ) -> StructureTensor:
    half = (cal.p95 - cal.p5) / 2.0
    mid = (cal.p95 + cal.p5) / 2.0
    adj = half * sd.entries() + mid
    return StructureTensor(*adj.tolist())


def struct_loss(x_hat: np.ndarray, x: np.ndarray, lam1: float, lam2: float,
                theta: float, cal: PercentileCalibration,
                mode: str = "paper") -> float:
    s_meas = normalize_st(compute_st(x_hat), x)
    s_des = adjust_sd(compose_sd(lam1, lam2, theta, mode), cal)
    return float(np.abs(s_meas.entries() - s_des.entries()).sum())


def struct_loss_on_tape(tape: Tape, x_hat: int, x: np.ndarray, lam1: float,
                        lam2: float, theta: float,
                        cal: PercentileCalibration,
                        mode: str = "paper") -> int:
    """Differentiable structure loss rooted at the x_hat node."""
    value = tape.value(x_hat)
    if value.shape[2] == 3:
        w = np.asarray(LUMA_WEIGHTS)
        chans = [tape.scale(tape.channel(x_hat, c), w[c]) for c in range(3)]
        lum = chans[0]
        for c in chans[1:]:
            lum = tape.add(lum, c)
    else:
        lum = x_hat
    gx = tape.conv2d(lum, DX_TAPS, BoundaryMode.REPLICATE)
    gy = tape.conv2d(lum, DY_TAPS, BoundaryMode.REPLICATE)
    s11 = tape.reduce_sum(tape.mul(gx, gx))
    s12 = tape.reduce_sum(tape.mul(gx, gy))
    s22 = tape.reduce_sum(tape.mul(gy, gy))
    d = st_normalizer(x)
    s_des = adjust_sd(compose_sd(lam1, lam2, theta, mode), cal).entries()
    terms = []
    for node, target in zip((s11, s12, s22), s_des):
        diff = tape.sub(tape.scale(node, 1.0 / d), tape.constant(target))
        terms.append(tape.absolute(diff))
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total


def calibrate_percentiles(images, with_reference=None
                          ) -> PercentileCalibration:
    """Empirical (P5, P95) of normalized tensor entries over an image set.

    Percentiles use linear interpolation between order statistics.  Each
    image doubles as its own normalization reference unless with_reference
    provides a parallel list of HR references.
    """
    images = list(images)
    if len(images) < 2:
        raise CalibrationError("need at least 2 images to calibrate")
    refs = list(with_reference) if with_reference is not None else images
    rows = []
    for img, ref in zip(images, refs):
        rows.append(normalize_st(compute_st(img), ref).entries())
    data = np.stack(rows)
    p5 = np.percentile(data, 5, axis=0, method="linear")
    p95 = np.percentile(data, 95, axis=0, method="linear")
    return PercentileCalibration(p5, p95)


# ---- latent-coverage loss ---------------------------------------------------

def descend_with_backtracking(loss_and_grad, x0: np.ndarray, iters: int,
                              step: float = 0.1, max_halvings: int = 30,
                              mask: np.ndarray | None = None,
                              on_step=None) -> tuple[np.ndarray, list[float]]:
    """Fixed-step gradient descent; steps that increase the value are halved
    away, which makes the recorded value sequence non-increasing.

    on_step(iteration, value), when given, is called after every iteration —
    job status polling hangs off it."""
    x = np.array(x0, dtype=np.float64)
    val, grad = loss_and_grad(x)
    trace = [val]
    cur_step = step
    for it in range(iters):
        g = grad if mask is None else grad * mask[..., None]
        moved = False
        # Retry doubling after successes so the step adapts both ways, and
        # offer a Polyak-style guess (exact for objectives with optimum 0);
        # bad guesses just get halved back away below.
        gg = float(np.sum(g * g))
        polyak = val / gg if gg > 0 else 0.0
        trial_step = max(cur_step * 2.0, polyak)
        for _ in range(max_halvings):
            cand = x - trial_step * g
            cand_val, cand_grad = loss_and_grad(cand)
            if cand_val <= val:
                x, val, grad = cand, cand_val, cand_grad
                cur_step = trial_step
                moved = True
                break
            trial_step /= 2.0
        trace.append(val)
        if on_step is not None:
            on_step(it + 1, val)
        if not moved:
            break
    return x, trace


MAP_SMOOTHING = 1e-4


def _smooth_l1(tape: Tape, diff: int) -> int:
    """mean(sqrt(d^2 + eps^2) - eps): matches mean |d| away from zero but is
    differentiable at the kink, so the descent does not stall there."""
    e = MAP_SMOOTHING
    soft = tape.sqrt(tape.add(tape.square(diff), tape.constant(e * e)))
    ones = np.ones_like(np.asarray(tape.value(diff)))
    return tape.reduce_mean(tape.sub(soft, tape.constant(e * ones)))


def map_loss(params: GeneratorParams, y: np.ndarray, x: np.ndarray,
             op: CemOperator, iters: int = 10, step: float = 0.5,
             z0: np.ndarray | None = None
             ) -> tuple[np.ndarray, float, list[float]]:
    """min over z of mean |psi(y, z) - x|, by backtracking gradient descent.

    Returns (final z, final value, value trace).
    """
    x = validate_image(x)
    if z0 is None:
        z0 = make_control_signal(op.hr_dims)

    def loss_and_grad(z):
        tape = Tape()
        zid = tape.leaf(z, marked=True)
        _, xhat = generate_on_tape(params, y, zid, op, tape)
        root = _smooth_l1(tape, tape.sub(xhat, tape.constant(x)))
        tape.backward(root)
        g = tape.grad(zid)
        if g is None:
            g = np.zeros_like(z)
        return tape.value(root), g

    z, trace = descend_with_backtracking(loss_and_grad, z0, iters, step)
    return z, trace[-1], trace


def map_loss_direct(y: np.ndarray, x: np.ndarray, op: CemOperator,
                    iters: int = 10, step: float = 0.5,
                    n0: np.ndarray | None = None
                    ) -> tuple[np.ndarray, float, list[float]]:
    """Direct-parameter variant: the latent is the nullspace perturbation."""
    x = validate_image(x)
    if n0 is None:
        n0 = np.zeros_like(x)

    def loss_and_grad(n):
        tape = Tape()
        nid = tape.leaf(n, marked=True)
        xhat = tape.add(tape.cem_linear(nid, op),
                        tape.constant(cem_apply(op, np.zeros_like(x), y)))
        root = _smooth_l1(tape, tape.sub(xhat, tape.constant(x)))
        tape.backward(root)
        g = tape.grad(nid)
        if g is None:
            g = np.zeros_like(n)
        return tape.value(root), g

    n, trace = descend_with_backtracking(loss_and_grad, n0, iters, step)
    return n, trace[-1], trace


# ---- toy adversarial pieces -------------------------------------------------

@dataclass
class LinearCritic:
    w: np.ndarray               # same shape as the images it scores
    b: float = 0.0

    def score(self, img: np.ndarray) -> float:
        return float(np.sum(self.w * img) + self.b)


def critic_losses(critic: LinearCritic, real: np.ndarray, fake: np.ndarray,
                  lambda_gp: float = 10.0) -> tuple[float, float]:
    """(critic loss, generator loss) of the toy Wasserstein setup.

    The input gradient of a linear critic is w everywhere, so the penalty
    (|grad D| - 1)^2 is (|w| - 1)^2, independent of the interpolate.
    """
    d_real = critic.score(real)
    d_fake = critic.score(fake)
    gp = (float(np.linalg.norm(critic.w)) - 1.0) ** 2
    loss_d = d_fake - d_real + lambda_gp * gp
    loss_g = -d_fake
    return loss_d, loss_g


def critic_grad(critic: LinearCritic, real: np.ndarray, fake: np.ndarray,
                lambda_gp: float = 10.0) -> tuple[np.ndarray, float]:
    """Analytic gradient of the critic loss w.r.t. (w, b)."""
    norm = float(np.linalg.norm(critic.w))
    if norm > 0:
        gp_grad = 2.0 * (norm - 1.0) * critic.w / norm
    else:
        gp_grad = np.zeros_like(critic.w)
    return fake - real + lambda_gp * gp_grad, 0.0


def credibility_gate(history) -> bool:
    """True iff the critic ranked real above fake for 10 straight batches."""
    h = list(history)
    return len(h) >= 10 and all(h[-10:])


def total_loss(adv: float, rng_loss: float, struct: float, map_val: float,
               weights: LossWeights = LossWeights()) -> float:
    return (adv + weights.lambda_range * rng_loss
            + weights.lambda_struct * struct + weights.lambda_map * map_val)
