"""Control-signal-steered toy generator wrapped by the consistency projection.

The generator maps (y, z) to an HR candidate x_inc; wrapping with the
projection makes the displayed x_hat structurally consistent with y for any
parameters and any z.  A network-free direct mode is also provided: there the
"latent" is the nullspace perturbation itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cem import CemOperator, cem_apply
from .errors import InvalidDims
from .imagekit import BoundaryMode, conv2d, upsample, validate_image
from .kernels import bicubic_interp_kernel
from .tape import Tape

Z_CHANNELS = 3


@dataclass
class ConvLayer:
    taps: np.ndarray            # (cout, cin, kh, kw); cin includes +3 for z
    bias: np.ndarray            # (cout,)
    nonlinearity: bool = True
    downscale: int = 1          # >1 runs this layer at a coarser resolution


@dataclass
class GeneratorParams:
    layers: list[ConvLayer]
    lrelu_slope: float = 0.2

    def out_channels(self) -> int:
        return self.layers[-1].taps.shape[0]


@dataclass(frozen=True)
class GeneratorOutput:
    x_inc: np.ndarray
    x_hat: np.ndarray


def make_control_signal(hr_dims: tuple[int, int],
                        fill: float = 0.0) -> np.ndarray:
    return np.full((hr_dims[0], hr_dims[1], Z_CHANNELS), fill)


def toy_params(img_channels: int, hidden: int = 16, alpha: int = 2,
               seed: int = 0, zero_z_weights: bool = False,
               scale: float = 0.1) -> GeneratorParams:
    """Three 3x3 layers, the middle one at the coarse resolution."""
    rng = np.random.default_rng(seed)

    def layer(cin, cout, nonlin, down):
        taps = rng.normal(0.0, scale, size=(cout, cin + Z_CHANNELS, 3, 3))
        taps[:, :cin, 1, 1] += np.eye(cout, cin)  # near-identity start
        if zero_z_weights:
            taps[:, cin:, :, :] = 0.0
        return ConvLayer(taps, np.zeros(cout), nonlin, down)

    return GeneratorParams([
        layer(img_channels, hidden, True, 1),
        layer(hidden, hidden, True, alpha),
        layer(hidden, img_channels, False, 1),
    ])


def identity_params(img_channels: int, n_layers: int = 3) -> GeneratorParams:
    """All-delta, linear, z-blind stack: x_inc equals the bicubic upsample."""
    layers = []
    for _ in range(n_layers):
        taps = np.zeros((img_channels, img_channels + Z_CHANNELS, 3, 3))
        for c in range(img_channels):
            taps[c, c, 1, 1] = 1.0
        layers.append(ConvLayer(taps, np.zeros(img_channels), False, 1))
    return GeneratorParams(layers)


def _conv_mc(x: np.ndarray, taps: np.ndarray, bias: np.ndarray,
             mode: BoundaryMode) -> np.ndarray:
    cout, cin = taps.shape[:2]
    if x.shape[2] != cin:
        raise InvalidDims(f"layer expects {cin} channels, got {x.shape[2]}")
    out = np.zeros((x.shape[0], x.shape[1], cout))
    for co in range(cout):
        acc = np.zeros(x.shape[:2])
        for ci in range(cin):
            acc += conv2d(x[:, :, ci:ci + 1], taps[co, ci], mode)[:, :, 0]
        out[:, :, co] = acc + bias[co]
    return out


def _area_down(x: np.ndarray, a: int) -> np.ndarray:
    h, w, c = x.shape
    if h % a or w % a:
        raise InvalidDims(f"dims {x.shape[:2]} not divisible by {a}")
    return x.reshape(h // a, a, w // a, a, c).mean(axis=(1, 3))


def bicubic_upsample(img: np.ndarray, alpha: int,
                     mode: BoundaryMode = BoundaryMode.PERIODIC) -> np.ndarray:
    """Zero-insertion upsampling followed by the interpolating cubic."""
    if alpha == 1:
        return validate_image(img).copy()
    return conv2d(upsample(img, alpha), bicubic_interp_kernel(alpha).taps, mode)


def generate(params: GeneratorParams, y: np.ndarray, z: np.ndarray,
             op: CemOperator) -> GeneratorOutput:
    y = validate_image(y)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (op.hr_dims[0], op.hr_dims[1], Z_CHANNELS):
        raise InvalidDims(f"z must be {op.hr_dims} x {Z_CHANNELS}, "
                          f"got {z.shape}")
    mode = op.boundary
    f = bicubic_upsample(y, op.alpha, mode)
    for layer in params.layers:
        d = layer.downscale
        if d > 1:
            f = _area_down(f, d)
            zs = _area_down(z, d)
        else:
            zs = z
        f = _conv_mc(np.concatenate([f, zs], axis=2),
                     layer.taps, layer.bias, mode)
        if layer.nonlinearity:
            f = np.where(f > 0, f, params.lrelu_slope * f)
        if d > 1:
            f = bicubic_upsample(f, d, mode)
    x_inc = f
    if x_inc.shape != (op.hr_dims[0], op.hr_dims[1], y.shape[2]):
        raise InvalidDims(f"generator produced {x_inc.shape}, expected "
                          f"{(*op.hr_dims, y.shape[2])}")
    return GeneratorOutput(x_inc, cem_apply(op, x_inc, y))


def generate_on_tape(params: GeneratorParams, y: np.ndarray, z_id: int,
                     op: CemOperator, tape: Tape,
                     param_ids: list[list[tuple[int, int]]] | None = None
                     ) -> tuple[int, int]:
    """Record the generator on a tape; returns (x_inc id, x_hat id).

    z_id is an existing tape node for the control signal.  When param_ids is
    given it must mirror params.layers: per layer, a list of
    (taps leaf for (cout, cin) pair ... ) laid out row-major plus a bias leaf,
    produced by params_on_tape; gradients then reach the parameters too.
    """
    y = validate_image(y)
    mode = op.boundary
    f = tape.constant(bicubic_upsample(y, op.alpha, mode))
    for li, layer in enumerate(params.layers):
        d = layer.downscale
        if d > 1:
            f = tape.avgpool(f, d)
            zs = tape.avgpool(z_id, d)
        else:
            zs = z_id
        x = tape.concat_channels([f, zs])
        cout, cin = layer.taps.shape[:2]
        outs = []
        for co in range(cout):
            acc = None
            for ci in range(cin):
                chan = tape.channel(x, ci)
                if param_ids is not None:
                    conv = tape.conv2d_param(chan, param_ids[li][co * cin + ci],
                                             mode)
                else:
                    conv = tape.conv2d(chan, layer.taps[co, ci], mode)
                acc = conv if acc is None else tape.add(acc, conv)
            if param_ids is not None:
                bias_entry = tape.slice2d(param_ids[li][-1], co, co + 1, 0, 1)
                bval = tape.reduce_sum(bias_entry)
                ones = tape.constant(np.ones(tape.value(acc).shape))
                acc = tape.add(acc, tape.mul(ones, bval))
            else:
                acc = tape.add(acc, tape.constant(
                    np.full(tape.value(acc).shape, layer.bias[co])))
            outs.append(acc)
        f = tape.concat_channels(outs) if len(outs) > 1 else outs[0]
        if layer.nonlinearity:
            f = tape.leaky_relu(f, params.lrelu_slope)
        if d > 1:
            up = tape.upsample(f, d)
            f = tape.conv2d(up, bicubic_interp_kernel(d).taps, mode)
    x_inc = f
    y_node = tape.constant(_perp_rep_input(op, y))
    x_hat = tape.add(tape.cem_linear(x_inc, op), y_node)
    return x_inc, x_hat


def _perp_rep_input(op: CemOperator, y: np.ndarray) -> np.ndarray:
    """The y-dependent constant term of the projection."""
    zero = np.zeros((op.hr_dims[0], op.hr_dims[1], y.shape[2]))
    return cem_apply(op, zero, y)


def params_on_tape(tape: Tape, params: GeneratorParams
                   ) -> list[list[int]]:
    """Mark every conv tap pair and bias as differentiable leaves."""
    ids = []
    for layer in params.layers:
        cout, cin = layer.taps.shape[:2]
        layer_ids = []
        for co in range(cout):
            for ci in range(cin):
                layer_ids.append(
                    tape.leaf(layer.taps[co, ci][:, :, None], marked=True))
        layer_ids.append(
            tape.leaf(layer.bias[:, None, None], marked=True))
        ids.append(layer_ids)
    return ids


def direct_param(y: np.ndarray, n: np.ndarray, op: CemOperator) -> np.ndarray:
    """Network-free exploration: the latent is the nullspace perturbation."""
    return cem_apply(op, n, y)


# ---- parameter (de)serialization -------------------------------------------

def save_params(path, params: GeneratorParams) -> None:
    doc = {"lrelu_slope": params.lrelu_slope, "layers": [
        {"taps": layer.taps.ravel().tolist(),
         "shape": list(layer.taps.shape),
         "bias": layer.bias.tolist(),
         "nonlinearity": layer.nonlinearity,
         "downscale": layer.downscale}
        for layer in params.layers]}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_params(path) -> GeneratorParams:
    with open(path) as fh:
        doc = json.load(fh)
    layers = [ConvLayer(np.asarray(l["taps"]).reshape(l["shape"]),
                        np.asarray(l["bias"], dtype=np.float64),
                        bool(l["nonlinearity"]), int(l["downscale"]))
              for l in doc["layers"]]
    return GeneratorParams(layers, float(doc.get("lrelu_slope", 0.2)))
