import numpy as np
import pytest

from cemx.cem import build_cem, consistency_residual, degrade
from cemx.generator import (bicubic_upsample, direct_param, generate,
                            generate_on_tape, identity_params, load_params,
                            make_control_signal, params_on_tape, save_params,
                            toy_params)
from cemx.errors import InvalidDims
from cemx.kernels import gaussian_kernel
from cemx.tape import Tape, grad_check


@pytest.fixture
def op():
    return build_cem(gaussian_kernel(0.8, radius=1), 2, (8, 8))


def test_identity_params_is_bicubic_upsample(rng, op):
    y = rng.random((4, 4, 1))
    z = rng.random((8, 8, 3))
    out = generate(identity_params(1), y, z, op)
    assert np.abs(out.x_inc - bicubic_upsample(y, 2)).max() < 1e-12


def test_zero_z_weights_ignore_z(rng, op):
    params = toy_params(1, hidden=4, alpha=2, seed=0, zero_z_weights=True)
    y = rng.random((4, 4, 1))
    a = generate(params, y, rng.random((8, 8, 3)), op).x_hat
    b = generate(params, y, rng.random((8, 8, 3)), op).x_hat
    assert np.abs(a - b).max() < 1e-12


def test_z_changes_output(rng, op):
    params = toy_params(1, hidden=4, alpha=2, seed=0)
    y = rng.random((4, 4, 1))
    a = generate(params, y, make_control_signal((8, 8)), op).x_hat
    b = generate(params, y, make_control_signal((8, 8), fill=0.5), op).x_hat
    assert np.abs(a - b).max() > 1e-6


def test_consistency_is_structural(rng, op):
    params = toy_params(1, hidden=4, alpha=2, seed=7)
    y = rng.random((4, 4, 1))
    out = generate(params, y, rng.random((8, 8, 3)), op)
    linf, _ = consistency_residual(op, out.x_hat, y)
    assert linf <= 1e-8


def test_tape_forward_matches_generate(rng, op):
    params = toy_params(1, hidden=4, alpha=2, seed=3)
    y = rng.random((4, 4, 1))
    z = rng.random((8, 8, 3))
    want = generate(params, y, z, op)
    t = Tape()
    zid = t.leaf(z, marked=True)
    x_inc, x_hat = generate_on_tape(params, y, zid, op, t)
    assert np.abs(t.value(x_inc) - want.x_inc).max() < 1e-12
    assert np.abs(t.value(x_hat) - want.x_hat).max() < 1e-12


def test_z_gradient_check(rng, op):
    params = toy_params(1, hidden=2, alpha=2, seed=5)
    y = rng.random((4, 4, 1))

    def build(t, zid):
        _, x_hat = generate_on_tape(params, y, zid, op, t)
        return t.mean_l1(t.sub(x_hat, t.constant(rng.random((8, 8, 1)))))
    rep = grad_check(build, rng.random((8, 8, 3)) * 0.3)
    assert rep["passed"], rep["max_rel_error"]


def test_perp_component_has_zero_z_gradient(rng, op):
    # The projection pins the row-space component to y, so z cannot move it.
    params = toy_params(1, hidden=2, alpha=2, seed=5)
    y = rng.random((4, 4, 1))
    t = Tape()
    zid = t.leaf(rng.random((8, 8, 3)), marked=True)
    _, x_hat = generate_on_tape(params, y, zid, op, t)
    root = t.reduce_sum(t.sub(x_hat, t.cem_linear(x_hat, op)))
    t.backward(root)
    g = t.grad(zid)
    assert g is None or np.abs(g).max() < 1e-10


def test_param_gradients(rng, op):
    params = toy_params(1, hidden=2, alpha=2, seed=2)
    y = rng.random((4, 4, 1))
    z = rng.random((8, 8, 3)) * 0.2
    target = rng.random((8, 8, 1))

    def objective(p):
        return float(np.mean(np.abs(generate(p, y, z, op).x_hat - target)))

    t = Tape()
    ids = params_on_tape(t, params)
    zid = t.constant(z)
    _, x_hat = generate_on_tape(params, y, zid, op, t, param_ids=ids)
    t.backward(t.mean_l1(t.sub(x_hat, t.constant(target))))

    # finite-difference a couple of taps against the tape gradient
    eps = 1e-6
    import copy
    for (li, co, ci, a, b) in [(0, 0, 0, 1, 1), (2, 0, 1, 0, 2)]:
        cin = params.layers[li].taps.shape[1]
        g = t.grad(ids[li][co * cin + ci])[a, b, 0]
        bumped = copy.deepcopy(params)
        bumped.layers[li].taps[co, ci, a, b] += eps
        hi = objective(bumped)
        bumped.layers[li].taps[co, ci, a, b] -= 2 * eps
        lo = objective(bumped)
        fd = (hi - lo) / (2 * eps)
        assert abs(g - fd) <= 1e-4 * max(abs(g), abs(fd), 1.0)


def test_direct_param_consistency(rng, op):
    y = rng.random((4, 4, 1))
    n = rng.random((8, 8, 1))
    x_hat = direct_param(y, n, op)
    assert np.abs(degrade(op, x_hat) - y).max() <= 1e-8


def test_bad_z_dims(rng, op):
    params = toy_params(1, hidden=2, alpha=2)
    with pytest.raises(InvalidDims):
        generate(params, rng.random((4, 4, 1)), rng.random((4, 4, 3)), op)


def test_params_round_trip(tmp_path):
    params = toy_params(1, hidden=3, alpha=2, seed=9)
    save_params(tmp_path / "p.json", params)
    back = load_params(tmp_path / "p.json")
    assert len(back.layers) == len(params.layers)
    for a, b in zip(back.layers, params.layers):
        assert np.abs(a.taps - b.taps).max() < 1e-15
        assert a.downscale == b.downscale and a.nonlinearity == b.nonlinearity
