"""Batch front door: projection wrapping, consistency checks, kernel tools,
headless edit jobs, metrics, calibration, the toy training loop, gradient
checking, and service launch.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import explorer, losses, objectives as obj
from .cem import build_cem, cem_apply, consistency_residual, degrade
from .errors import CemxError, InvalidParam, IoError
from .generator import (generate, generate_on_tape, make_control_signal,
                        params_on_tape, save_params, toy_params)
from .imagekit import BoundaryMode, load_image, save_image
from .kernels import (Kernel, bicubic_kernel, invert_composed, load_kernel,
                      save_kernel)
from .losses import (IDENTITY_CALIBRATION, LinearCritic, LossWeights,
                     calibrate_percentiles, credibility_gate, critic_grad,
                     critic_losses, range_loss_on_tape, st_orientation,
                     struct_loss_on_tape)
from .tape import Tape, grad_check

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _boundary(args) -> BoundaryMode:
    return BoundaryMode(getattr(args, "boundary", "periodic"))


def _kernel(args, alpha: int) -> Kernel:
    if getattr(args, "kernel", None):
        return load_kernel(args.kernel)
    return bicubic_kernel(alpha)


def _operator(args, y: np.ndarray):
    alpha = args.scale
    hr = (y.shape[0] * alpha, y.shape[1] * alpha)
    return build_cem(_kernel(args, alpha), alpha, hr, _boundary(args))


# ---- subcommands ------------------------------------------------------------

def cmd_cem_apply(args) -> int:
    y = load_image(args.lr)
    op = _operator(args, y)
    x_inc = load_image(args.input) if args.input else \
        np.zeros((*op.hr_dims, y.shape[2]))
    out = cem_apply(op, x_inc, y)
    # .npy keeps the float result exact; raster formats clip and quantize.
    save_image(args.out, out if str(args.out).endswith(".npy")
               else np.clip(out, 0.0, 1.0))
    linf, rms = consistency_residual(op, out, y)
    _emit(args, {"linf": linf, "rms": rms, "out": str(args.out)},
          f"wrote {args.out}  linf={linf:.3e} rms={rms:.3e}")
    return EXIT_OK


def cmd_cem_check(args) -> int:
    y = load_image(args.lr)
    op = _operator(args, y)
    sr = load_image(args.sr)
    if sr.shape[:2] != op.hr_dims:
        raise InvalidParam(f"SR dims {sr.shape[:2]} != expected {op.hr_dims}")
    linf, rms = consistency_residual(op, sr, y)
    ok = linf <= args.tol
    _emit(args, {"linf": linf, "rms": rms, "tol": args.tol, "passed": ok},
          f"linf={linf:.3e} rms={rms:.3e} tol={args.tol:.1e} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_kernel_bicubic(args) -> int:
    k = bicubic_kernel(args.scale)
    save_kernel(args.out, k)
    _emit(args, {"out": str(args.out), "rows": k.rows, "cols": k.cols},
          f"wrote {args.out} ({k.rows}x{k.cols} taps)")
    return EXIT_OK


def cmd_kernel_invert(args) -> int:
    k = load_kernel(args.kernel)
    inv = invert_composed(k, args.scale, (args.grid, args.grid))
    payload = {"grid": args.grid, "scale": args.scale,
               "floored_bins": inv.floored_bins, "eps": inv.eps}
    if args.report:
        mag = np.abs(inv.spectrum)
        payload.update({"max_gain": float(mag.max()),
                        "min_gain": float(mag.min())})
    _emit(args, payload,
          f"inverse on {args.grid}x{args.grid} grid: "
          f"{inv.floored_bins} floored bins" +
          (f", gain [{np.abs(inv.spectrum).min():.3e}, "
           f"{np.abs(inv.spectrum).max():.3e}]" if args.report else ""))
    return EXIT_OK


def cmd_edit_run(args) -> int:
    session_dir = Path(args.session)
    y = load_image(session_dir / "y.png")
    latent = explorer.load_latent(session_dir / "latent.bin")
    if latent.shape[0] % y.shape[0] or latent.shape[1] % y.shape[1]:
        raise InvalidParam("latent dims are not a multiple of LR dims")
    alpha = latent.shape[0] // y.shape[0]
    kernel = load_kernel(session_dir / "kernel.json")
    mode = "generator" if latent.shape[2] != y.shape[2] or \
        (session_dir / "params.json").exists() else "direct"
    params = None
    if mode == "generator":
        from .generator import load_params
        params = load_params(session_dir / "params.json")
    session = explorer.new_session(y, kernel, alpha, mode, _boundary(args),
                                   params)
    session.latent = latent
    session.x_hat = cem_apply(session.op, latent, y) if mode == "direct" \
        else generate(params, y, latent, session.op).x_hat
    with open(args.spec) as fh:
        doc = json.load(fh)
    spec = obj.EditJobSpec(doc["tool"], doc.get("region", {}),
                           doc.get("params", {}),
                           int(doc.get("steps", 50)),
                           float(doc.get("step_size", 0.5)))
    trace = explorer.run_edit(session, spec)
    explorer.export_session(session, session_dir)
    linf, rms = consistency_residual(session.op, session.x_hat, y)
    _emit(args, {"trace": trace, "linf": linf, "rms": rms},
          f"{len(trace) - 1} steps, objective {trace[0]:.4g} -> "
          f"{trace[-1]:.4g}, linf={linf:.3e}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    outputs = sorted(Path(args.outputs).glob("*.png")) + \
        sorted(Path(args.outputs).glob("*.pgm"))
    if not outputs:
        raise IoError(f"no images found in {args.outputs}")
    images = [load_image(p) for p in outputs]
    if args.metric in ("rmse", "psnr"):
        ref = load_image(args.ref)
        fn = explorer.rmse if args.metric == "rmse" else explorer.psnr
        values = {p.name: fn(img, ref) for p, img in zip(outputs, images)}
        mean = float(np.mean(list(values.values())))
        _emit(args, {"per_image": values, "mean": mean},
              "\n".join(f"{n}: {v:.4f}" for n, v in values.items()) +
              f"\nmean: {mean:.4f}")
    else:
        y = load_image(args.lr)
        op = _operator(args, y)
        ref = load_image(args.ref) if args.ref else None
        report = explorer.diversity_metric(images, op, ref)
        payload = {"sigma": report.sigma}
        text = f"sigma: {report.sigma:.4f}"
        if ref is not None:
            payload.update({"rmse_mean": report.rmse_mean,
                            "rmse_std": report.rmse_std,
                            "per_image_rmse": report.per_image_rmse})
            text += f"\nrmse: {report.rmse_mean:.4f} +- {report.rmse_std:.4f}"
        _emit(args, payload, text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    paths = sorted(Path(args.images).glob("*.png")) + \
        sorted(Path(args.images).glob("*.pgm"))
    images = [load_image(p) for p in paths]
    cal = calibrate_percentiles(images)
    doc = {"p5": cal.p5.tolist(), "p95": cal.p95.tolist()}
    with open(args.out, "w") as fh:
        json.dump(doc, fh)
    _emit(args, {**doc, "out": str(args.out)},
          f"wrote {args.out}  p5={cal.p5.round(4).tolist()} "
          f"p95={cal.p95.round(4).tolist()}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    rng = np.random.default_rng(args.seed)
    paths = sorted(Path(args.images).glob("*.png")) + \
        sorted(Path(args.images).glob("*.pgm"))
    if not paths:
        raise IoError(f"no training images in {args.images}")
    reals = [load_image(p) for p in paths]
    shape = reals[0].shape
    reals = [r for r in reals if r.shape == shape]
    alpha = args.scale
    if shape[0] % alpha or shape[1] % alpha:
        raise InvalidParam(f"image dims {shape[:2]} not divisible by "
                           f"scale {alpha}")
    op = build_cem(bicubic_kernel(alpha), alpha, shape[:2],
                   BoundaryMode.PERIODIC)
    params = toy_params(shape[2], hidden=args.hidden, alpha=alpha,
                        seed=args.seed)
    critic = LinearCritic(rng.standard_normal(shape) * 0.01)
    weights = LossWeights()
    history: list[bool] = []
    gen_steps = 0
    log: list[dict] = []
    for step in range(args.steps):
        real = reals[rng.integers(len(reals))]
        y = degrade(op, real)
        z = rng.normal(0.0, 0.5, size=make_control_signal(op.hr_dims).shape)
        fake = generate(params, y, z, op).x_hat
        gw, gb = critic_grad(critic, real, fake, weights.lambda_gp)
        critic.w = critic.w - args.lr_critic * gw
        critic.b = critic.b - args.lr_critic * gb
        d_real, d_fake = critic.score(real), critic.score(fake)
        history.append(d_real > d_fake)
        credible = credibility_gate(history)
        if credible:
            params = _generator_step(params, y, z, real, op, critic, weights,
                                     args.lr_gen)
            gen_steps += 1
        loss_d, loss_g = critic_losses(critic, real, fake, weights.lambda_gp)
        log.append({"step": step, "loss_d": loss_d, "loss_g": loss_g,
                    "credible": credible})
    doc = {"w": critic.w.ravel().tolist(), "w_shape": list(critic.w.shape),
           "b": critic.b, "generator_steps": gen_steps,
           "credible": credibility_gate(history)}
    with open(args.out, "w") as fh:
        json.dump(doc, fh)
    if args.params_out:
        save_params(args.params_out, params)
    _emit(args, {"out": str(args.out), "generator_steps": gen_steps,
                 "credible": doc["credible"],
                 "final_loss_d": log[-1]["loss_d"]},
          f"{args.steps} steps, {gen_steps} generator updates, "
          f"gate={'open' if doc['credible'] else 'closed'}, "
          f"wrote {args.out}")
    return EXIT_OK


def _generator_step(params, y, z, real, op, critic, weights, lr):
    """One descent step of the full generator objective on the tape."""
    tape = Tape()
    param_ids = params_on_tape(tape, params)
    zid = tape.constant(z)
    _, x_hat = generate_on_tape(params, y, zid, op, tape,
                                param_ids=param_ids)
    adv = tape.neg(tape.add(tape.reduce_sum(
        tape.mul(x_hat, tape.constant(critic.w))), tape.constant(critic.b)))
    rng_term = range_loss_on_tape(tape, x_hat)
    lam1, lam2, theta = _self_targets(real)
    struct = struct_loss_on_tape(tape, x_hat, real, lam1, lam2, theta,
                                 IDENTITY_CALIBRATION)
    map_term = tape.mean_l1(tape.sub(x_hat, tape.constant(real)))
    root = tape.add(
        tape.add(adv, tape.scale(rng_term, weights.lambda_range)),
        tape.add(tape.scale(struct, weights.lambda_struct),
                 tape.scale(map_term, weights.lambda_map)))
    tape.backward(root)
    return _apply_param_grads(tape, params, param_ids, lr)


def _self_targets(real):
    from .losses import compute_st, normalize_st
    lam1, lam2, theta = st_orientation(normalize_st(compute_st(real), real))
    return min(max(lam1, 0.0), 1.0), min(max(lam2, 0.0), 1.0), theta


def _apply_param_grads(tape, params, param_ids, lr):
    from .generator import ConvLayer, GeneratorParams
    new_layers = []
    for layer, ids in zip(params.layers, param_ids):
        taps = layer.taps.copy()
        cout, cin = taps.shape[0], taps.shape[1]
        for co in range(cout):
            for ci in range(cin):
                g = tape.grad(ids[co * cin + ci])
                if g is not None:
                    taps[co, ci] -= lr * g[:, :, 0]
        bias = layer.bias.copy()
        gb = tape.grad(ids[-1])
        if gb is not None:
            bias -= lr * gb[:, 0, 0]
        new_layers.append(ConvLayer(taps, bias, layer.nonlinearity,
                                    layer.downscale))
    return GeneratorParams(new_layers, params.lrelu_slope)


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    dims = (8, 8)
    base = rng.random((*dims, 1))
    mask = np.ones(dims)
    half = obj.rect_mask(dims, 1, 1, 6, 6)
    src = obj.source_patches_from(rng.random((10, 10, 1)), np.ones((10, 10)))
    checks = {
        "range_loss": lambda t, l: range_loss_on_tape(t, l),
        "struct_loss": lambda t, l: struct_loss_on_tape(
            t, l, base, 0.7, 0.3, 0.5, IDENTITY_CALIBRATION),
        "variance": lambda t, l: obj.variance_objective(t, l, mask, 0.01,
                                                        base),
        "magnitude": lambda t, l: obj.magnitude_objective(t, l, mask, 1.5,
                                                          base),
        "scribble": lambda t, l: obj.scribble_objective(
            t, l, obj.Scribble(half, "color", np.full((*dims, 1), 0.7))),
        "brightness": lambda t, l: obj.brightness_objective(
            t, l, obj.Scribble(half, "brighten"), 1.3, base),
        "local_tv": lambda t, l: obj.local_tv_objective(
            t, l, obj.Scribble(half, "tv_min")),
        "imprint": lambda t, l: obj.imprint_objective(t, l, base,
                                                      (1, 1, 4, 4)),
        "patch_plain": lambda t, l: obj.patch_collection_objective(
            t, l, mask, src, "plain"),
        "patch_varpre": lambda t, l: obj.patch_collection_objective(
            t, l, mask, src, "variance_preserving", base),
        "periodicity": lambda t, l: obj.periodicity_objective(
            t, l, mask, [(0, 1)], [4]),
    }
    results = {}
    worst = 0.0
    for name, builder in checks.items():
        x0 = rng.random((*dims, 1))
        rep = grad_check(builder, x0, tol=args.tol)
        results[name] = rep["max_rel_error"]
        worst = max(worst, rep["max_rel_error"])
        if not args.json:
            print(f"{name:14s} max_rel_error={rep['max_rel_error']:.3e} "
                  f"{'PASS' if rep['passed'] else 'FAIL'}")
    ok = worst <= args.tol
    if args.json:
        print(json.dumps({"results": results, "worst": worst, "passed": ok},
                         sort_keys=True))
    elif not ok:
        print(f"worst {worst:.3e} exceeds tol {args.tol:.1e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_serve(args) -> int:
    from .service import serve
    serve(args.addr)
    return EXIT_OK


# ---- argument plumbing ------------------------------------------------------

def _load_config(path) -> dict:
    """key=value per line; '#' comments; values parsed as JSON when valid."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            try:
                out[key.strip()] = json.loads(value.strip())
            except ValueError:
                out[key.strip()] = value.strip()
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", action="store_true",
                   help="machine-readable JSON output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value defaults file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cemx")
    sub = parser.add_subparsers(dest="command", required=True)

    cem = sub.add_parser("cem").add_subparsers(dest="sub", required=True)
    p = cem.add_parser("apply")
    p.add_argument("--lr", required=True)
    p.add_argument("--input", help="candidate HR image (default zeros)")
    p.add_argument("--out", required=True)
    p.add_argument("--kernel")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--boundary", default="periodic",
                   choices=["periodic", "replicate"])
    _add_common(p)
    p.set_defaults(fn=cmd_cem_apply)
    p = cem.add_parser("check")
    p.add_argument("--lr", required=True)
    p.add_argument("--sr", required=True)
    p.add_argument("--kernel")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--boundary", default="periodic",
                   choices=["periodic", "replicate"])
    p.add_argument("--tol", type=float, default=1e-8)
    _add_common(p)
    p.set_defaults(fn=cmd_cem_check)

    kern = sub.add_parser("kernel").add_subparsers(dest="sub", required=True)
    p = kern.add_parser("bicubic")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_kernel_bicubic)
    p = kern.add_parser("invert")
    p.add_argument("--kernel", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--report", action="store_true")
    _add_common(p)
    p.set_defaults(fn=cmd_kernel_invert)

    edit = sub.add_parser("edit").add_subparsers(dest="sub", required=True)
    p = edit.add_parser("run")
    p.add_argument("--session", required=True, help="session directory")
    p.add_argument("--spec", required=True, help="edit spec json")
    p.add_argument("--boundary", default="periodic",
                   choices=["periodic", "replicate"])
    _add_common(p)
    p.set_defaults(fn=cmd_edit_run)

    p = sub.add_parser("metrics")
    p.add_argument("metric", choices=["rmse", "psnr", "diversity"])
    p.add_argument("--ref")
    p.add_argument("--outputs", required=True)
    p.add_argument("--lr", help="LR image (diversity)")
    p.add_argument("--kernel")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--boundary", default="periodic",
                   choices=["periodic", "replicate"])
    _add_common(p)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("calibrate")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_calibrate)

    train = sub.add_parser("train").add_subparsers(dest="sub", required=True)
    p = train.add_parser("toy")
    p.add_argument("--images", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--params-out")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--lr-critic", type=float, default=0.05)
    p.add_argument("--lr-gen", type=float, default=1e-4)
    _add_common(p)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("gradcheck")
    p.add_argument("--all", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("serve")
    p.add_argument("--addr", help="host:port (default env CEMX_ADDR)")
    _add_common(p)
    p.set_defaults(fn=cmd_serve)

    return parser


def _merge_config(argv: list[str]) -> list[str]:
    """Expand a --config file into flags; explicit flags win."""
    if "--config" not in argv:
        return argv
    path = argv[argv.index("--config") + 1]
    extra = []
    for key, value in _load_config(path).items():
        flag = f"--{key}"
        if flag not in argv:
            extra += [flag, str(value)]
    return argv + extra


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(_merge_config(list(argv)))
    try:
        return args.fn(args)
    except CemxError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
