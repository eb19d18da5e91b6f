"""Session state and the latent-optimization loop behind every editing tool.

A session owns the LR image, the projection operator, a latent (the control
signal in generator mode, the nullspace perturbation in direct mode), the
current output, and a bounded undo history of latents.  All mutations go
through the single-writer lock; the displayed image is regenerated from the
latent, so consistency with y holds structurally after every operation.
"""

from __future__ import annotations

import struct
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objectives as obj
from .cem import (CemOperator, build_cem, cem_apply, consistency_residual,
                  project_nullspace)
from .errors import Busy, InvalidDims, InvalidParam, NothingToUndo
from .generator import (GeneratorParams, Z_CHANNELS, generate,
                        generate_on_tape, make_control_signal)
from .imagekit import BoundaryMode, save_png, validate_image
from .kernels import Kernel, save_kernel
from .losses import compose_sd, descend_with_backtracking
from .tape import Tape

HISTORY_LIMIT = 64
LATENT_MAGIC = b"CEMZ"
KNOWN_TOOLS = ("variance", "magnitude", "scribble", "brighten", "darken",
               "tv_min", "imprint", "patch_collection", "periodicity")


@dataclass
class DiversityReport:
    sigma: float                    # 0-255 scale
    per_pixel_std: np.ndarray
    rmse_mean: float | None = None
    rmse_std: float | None = None
    per_image_rmse: list[float] = field(default_factory=list)


@dataclass
class Session:
    y: np.ndarray
    op: CemOperator
    mode: str                       # "direct" or "generator"
    latent: np.ndarray
    x_hat: np.ndarray
    params: GeneratorParams | None = None
    tau: float = 0.01
    id: str = field(default_factory=lambda: uuid.uuid4().hex)
    history: list[np.ndarray] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    busy: bool = False

    @property
    def hr_dims(self) -> tuple[int, int]:
        return self.op.hr_dims


def new_session(y: np.ndarray, h: Kernel, alpha: int,
                mode: str = "direct",
                boundary: BoundaryMode = BoundaryMode.PERIODIC,
                params: GeneratorParams | None = None,
                tau: float = 0.01) -> Session:
    y = validate_image(y)
    hr_dims = (y.shape[0] * alpha, y.shape[1] * alpha)
    op = build_cem(h, alpha, hr_dims, boundary)
    if mode == "generator":
        if params is None:
            raise InvalidParam("generator mode needs parameters")
        latent = make_control_signal(hr_dims)
    elif mode == "direct":
        latent = np.zeros((hr_dims[0], hr_dims[1], y.shape[2]))
    else:
        raise InvalidParam(f"unknown session mode {mode!r}")
    session = Session(y, op, mode, latent, np.zeros(1), params, tau)
    session.x_hat = _render(session, latent)
    return session


def _render(session: Session, latent: np.ndarray) -> np.ndarray:
    if session.mode == "generator":
        return generate(session.params, session.y, latent, session.op).x_hat
    return cem_apply(session.op, latent, session.y)


def _push_history(session: Session) -> None:
    session.history.append(session.latent.copy())
    if len(session.history) > HISTORY_LIMIT:
        session.history.pop(0)


def undo(session: Session) -> np.ndarray:
    with session.lock:
        if not session.history:
            raise NothingToUndo("history is empty")
        session.latent = session.history.pop()
        session.x_hat = _render(session, session.latent)
        return session.x_hat


# ---- knob editing -----------------------------------------------------------

def encode_knobs(lam1: float, lam2: float, theta: float) -> np.ndarray:
    """Three tensor entries mapped affinely into [-1, 1].

    Diagonal entries live in [0, 1]; the paper-mode off-diagonal lives in
    [-1/2, 1/2].
    """
    s = compose_sd(lam1, lam2, theta, mode="paper")
    return np.array([2.0 * s.s11 - 1.0, 2.0 * s.s12, 2.0 * s.s22 - 1.0])


def decode_knobs(encoded: np.ndarray) -> tuple[float, float, float]:
    """Inverse affine map back to the (s11, s12, s22) entries."""
    e = np.asarray(encoded, dtype=np.float64)
    return ((e[0] + 1.0) / 2.0, e[1] / 2.0, (e[2] + 1.0) / 2.0)


def set_knobs(session: Session, region: dict, lam1: float, lam2: float,
              theta: float) -> np.ndarray:
    encoded = encode_knobs(lam1, lam2, theta)
    mask = obj.region_to_mask(region, session.hr_dims)
    with session.lock:
        _require_idle(session)
        _push_history(session)
        latent = session.latent.copy()
        sel = mask >= 0.5
        if latent.shape[2] == Z_CHANNELS:
            for c in range(Z_CHANNELS):
                latent[sel, c] = encoded[c]
        else:
            # Non-3-channel latents receive the mean of the encoded triple.
            latent[sel, :] = encoded.mean()
        session.latent = latent
        session.x_hat = _render(session, latent)
        return session.x_hat


def _require_idle(session: Session) -> None:
    if session.busy:
        raise Busy("a job is already running on this session")


# ---- the optimization loop --------------------------------------------------

def _latent_to_xhat(session: Session, tape: Tape, latent_id: int) -> int:
    if session.mode == "generator":
        _, x_hat = generate_on_tape(session.params, session.y, latent_id,
                                    session.op, tape)
        return x_hat
    rep = cem_apply(session.op, np.zeros_like(session.latent), session.y)
    return tape.add(tape.cem_linear(latent_id, session.op),
                    tape.constant(rep))


def _tv_regularizer(session: Session, tape: Tape, latent_id: int) -> int:
    pn = tape.cem_linear(latent_id, session.op) \
        if session.mode == "direct" else latent_id
    dx = tape.sub(pn, tape.shift(pn, 0, 1))
    dy = tape.sub(pn, tape.shift(pn, 1, 0))
    return tape.add(tape.l1(dx), tape.l1(dy))


def build_objective(session: Session, tape: Tape, x_hat_id: int,
                    spec: obj.EditJobSpec, baseline: np.ndarray) -> int:
    """Dispatch an EditJobSpec to its objective builder."""
    mask = obj.region_to_mask(spec.region, session.hr_dims)
    p = spec.params
    tool = spec.tool
    if tool == "variance":
        return obj.variance_objective(tape, x_hat_id, mask,
                                      float(p.get("delta", 0.0)), baseline)
    if tool == "magnitude":
        return obj.magnitude_objective(tape, x_hat_id, mask,
                                       float(p.get("factor", 1.0)), baseline)
    if tool == "scribble":
        target = np.asarray(p["target"], dtype=np.float64)
        if target.ndim == 1:
            target = np.broadcast_to(
                target, (*session.hr_dims, baseline.shape[2])).copy()
        scr = obj.Scribble(mask, "color", target, int(p.get("width", 1)))
        return obj.scribble_objective(tape, x_hat_id, scr)
    if tool in ("brighten", "darken"):
        scr = obj.Scribble(mask, tool, None, int(p.get("width", 1)))
        return obj.brightness_objective(tape, x_hat_id, scr,
                                        float(p["factor"]), baseline)
    if tool == "tv_min":
        scr = obj.Scribble(mask, "tv_min")
        return obj.local_tv_objective(tape, x_hat_id, scr)
    if tool == "imprint":
        rect = tuple(int(v) for v in p["rect"])
        content = np.asarray(p["content"], dtype=np.float64)
        base = obj.imprint_baseline(session.op, session.y, baseline, content,
                                    rect, tuple(p.get("offset", (0, 0))))
        return obj.imprint_objective(tape, x_hat_id, base, rect)
    if tool == "patch_collection":
        source_mask = obj.region_to_mask(p["source_region"], session.hr_dims)
        source_img = np.asarray(p.get("source_image", baseline),
                                dtype=np.float64)
        sources = obj.source_patches_from(source_img, source_mask)
        return obj.patch_collection_objective(
            tape, x_hat_id, mask, sources,
            p.get("variant", "plain"), baseline)
    if tool == "periodicity":
        directions = [tuple(int(v) for v in d) for d in p["directions"]]
        periods = p.get("periods")
        if periods is None:
            periods = [obj.estimate_period(baseline, mask, d)
                       for d in directions]
        return obj.periodicity_objective(tape, x_hat_id, mask, directions,
                                         [int(v) for v in periods])
    raise InvalidParam(f"unknown tool {tool!r}")


def run_edit(session: Session, spec: obj.EditJobSpec,
             on_step=None) -> list[float]:
    """Gradient descent over the latent, restricted to the spec's region.

    Returns the accepted-step objective trace.  The displayed image is
    re-rendered from the latent after every accepted step, so consistency
    is structural.
    """
    with session.lock:
        _require_idle(session)
        session.busy = True
    try:
        baseline = session.x_hat.copy()
        mask = obj.region_to_mask(spec.region, session.hr_dims)

        def loss_and_grad(latent):
            tape = Tape()
            lid = tape.leaf(latent, marked=True)
            x_hat_id = _latent_to_xhat(session, tape, lid)
            root = build_objective(session, tape, x_hat_id, spec, baseline)
            if session.tau > 0:
                root = tape.add(root, tape.scale(
                    _tv_regularizer(session, tape, lid), session.tau))
            tape.backward(root)
            g = tape.grad(lid)
            if g is None:
                g = np.zeros_like(latent)
            return tape.value(root), g

        _push_history(session)
        latent, trace = descend_with_backtracking(
            loss_and_grad, session.latent, spec.steps, spec.step_size,
            mask=mask, on_step=on_step)
        with session.lock:
            session.latent = latent
            session.x_hat = _render(session, latent)
        return trace
    finally:
        session.busy = False


def diverse_alternatives(session: Session, n: int, anchored: bool = False,
                         steps: int = 20, step_size: float = 0.5,
                         mu: float = 0.1, seed: int = 0, init_scale: float = 0.1
                         ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Jointly optimize n latent copies for mutual L1 diversity.

    Returns (latents, preview images); the caller picks one to adopt.
    """
    if not 2 <= n <= 8:
        raise InvalidParam("n must be in [2, 8]")
    with session.lock:
        _require_idle(session)
        session.busy = True
    try:
        rng = np.random.default_rng(seed)
        base = session.latent
        stack = np.stack([base + init_scale * rng.standard_normal(base.shape)
                          for _ in range(n)])
        anchor = session.x_hat.copy() if anchored else None

        def loss_and_grad(latents):
            tape = Tape()
            lids = [tape.leaf(latents[i], marked=True) for i in range(n)]
            outs = [_latent_to_xhat(session, tape, lid) for lid in lids]
            root = obj.diversity_objective(tape, outs, anchor, mu)
            tape.backward(root)
            grads = np.stack([
                tape.grad(lid) if tape.grad(lid) is not None
                else np.zeros_like(base) for lid in lids])
            return tape.value(root), grads

        stack, _ = descend_with_backtracking(loss_and_grad, stack, steps,
                                             step_size)
        latents = [stack[i] for i in range(n)]
        previews = [_render(session, l) for l in latents]
        return latents, previews
    finally:
        session.busy = False


def adopt_latent(session: Session, latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != session.latent.shape:
        raise InvalidDims("latent shape mismatch")
    with session.lock:
        _require_idle(session)
        _push_history(session)
        session.latent = latent.copy()
        session.x_hat = _render(session, session.latent)
        return session.x_hat


# ---- metrics ----------------------------------------------------------------

def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean square error on the 0-255 scale."""
    a, b = validate_image(a), validate_image(b)
    if a.shape != b.shape:
        raise InvalidDims(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)) * 255.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    r = rmse(a, b)
    return float("inf") if r == 0.0 else float(20.0 * np.log10(255.0 / r))


def diversity_metric(outputs: list[np.ndarray], op: CemOperator,
                     reference: np.ndarray | None = None) -> DiversityReport:
    """Mean per-pixel std of nullspace-projected outputs (0-255 scale)."""
    if len(outputs) < 2:
        raise InvalidParam("need at least 2 outputs")
    projected = []
    for o in outputs:
        o = validate_image(o)
        if o.shape != validate_image(outputs[0]).shape:
            raise InvalidDims("output dims differ")
        projected.append(project_nullspace(op, o))
    stack = np.stack(projected)
    std = stack.std(axis=0) * 255.0
    report = DiversityReport(float(std.mean()), std)
    if reference is not None:
        vals = [rmse(o, reference) for o in outputs]
        report.per_image_rmse = vals
        report.rmse_mean = float(np.mean(vals))
        report.rmse_std = float(np.std(vals))
    return report


# ---- session export ---------------------------------------------------------

def save_latent(path, latent: np.ndarray) -> None:
    latent = np.asarray(latent, dtype="<f8")
    header = LATENT_MAGIC + struct.pack("<III", *latent.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(latent.tobytes())


def load_latent(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != LATENT_MAGIC:
            raise InvalidParam(f"not a latent file: {path}")
        h, w, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != h * w * c:
        raise InvalidParam(f"latent payload size mismatch in {path}")
    return data.reshape(h, w, c).copy()


def export_session(session: Session, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_png(directory / "y.png", session.y)
    save_kernel(directory / "kernel.json", session.op.h)
    save_latent(directory / "latent.bin", session.latent)
    save_png(directory / "xhat.png", session.x_hat)
    if session.params is not None:
        from .generator import save_params
        save_params(directory / "params.json", session.params)
