import numpy as np
import pytest

from cemx.cem import build_cem
from cemx.errors import GraphShapeError
from cemx.imagekit import BoundaryMode
from cemx.kernels import gaussian_kernel
from cemx.tape import Tape, grad_check


def test_eager_values(rng):
    t = Tape()
    a = t.leaf(rng.random((3, 3, 1)))
    b = t.add(a, a)
    assert np.array_equal(t.value(b), 2 * t.value(a))


def test_backward_requires_scalar_root(rng):
    t = Tape()
    a = t.leaf(rng.random((3, 3, 1)), marked=True)
    b = t.add(a, a)
    with pytest.raises(GraphShapeError):
        t.backward(b)


def test_shape_mismatch(rng):
    t = Tape()
    a = t.leaf(rng.random((3, 3, 1)))
    b = t.leaf(rng.random((4, 4, 1)))
    with pytest.raises(GraphShapeError):
        t.add(a, b)


def test_unmarked_leaf_gets_no_grad(rng):
    t = Tape()
    a = t.leaf(rng.random((3, 3, 1)), marked=False)
    root = t.reduce_sum(a)
    t.backward(root)
    assert t.grad(a) is None


def test_sum_gradient_is_ones(rng):
    t = Tape()
    a = t.leaf(rng.random((3, 3, 1)), marked=True)
    t.backward(t.reduce_sum(a))
    assert np.array_equal(t.grad(a), np.ones((3, 3, 1)))


@pytest.mark.parametrize("build", [
    lambda t, l: t.reduce_sum(t.mul(l, l)),
    lambda t, l: t.mean_l1(t.sub(l, t.constant(0.3))),
    lambda t, l: t.reduce_sum(t.conv2d(l, np.array([[0.0, 1.0, 0.0],
                                                    [1.0, -4.0, 1.0],
                                                    [0.0, 1.0, 0.0]]))),
    lambda t, l: t.reduce_sum(t.conv2d(l, np.full((3, 3), 1 / 9),
                                       BoundaryMode.REPLICATE)),
    lambda t, l: t.reduce_sum(t.square(t.downsample(l, 2))),
    lambda t, l: t.reduce_sum(t.square(t.upsample(l, 2))),
    lambda t, l: t.reduce_sum(t.square(t.avgpool(l, 2))),
    lambda t, l: t.sq_norm(t.leaky_relu(t.sub(l, t.constant(0.5)))),
    lambda t, l: t.reduce_sum(t.mul(t.shift(l, 1, -2), l)),
    lambda t, l: t.reduce_sum(t.square(t.slice2d(l, 1, 3, 0, 2))),
    lambda t, l: t.reduce_sum(t.sqrt(t.add(t.square(l), t.constant(0.1)))),
    lambda t, l: t.reduce_sum(t.reciprocal(t.add(t.square(l),
                                                 t.constant(0.5)))),
    lambda t, l: t.scale(t.reduce_mean(l), -3.0),
])
def test_op_grad_checks(rng, build):
    rep = grad_check(build, rng.random((4, 4, 1)) + 0.1)
    assert rep["passed"], rep["max_rel_error"]


def test_concat_channel_grads(rng):
    def build(t, l):
        both = t.concat_channels([l, t.scale(l, 2.0)])
        return t.reduce_sum(t.square(t.channel(both, 1)))
    rep = grad_check(build, rng.random((3, 3, 1)))
    assert rep["passed"]


def test_cem_linear_grad(rng):
    op = build_cem(gaussian_kernel(0.8, radius=1), 2, (8, 8))

    def build(t, l):
        return t.sq_norm(t.cem_linear(l, op))
    rep = grad_check(build, rng.random((8, 8, 1)))
    assert rep["passed"]


def test_clip_straight_through():
    # Gradient passes where the value is inside [0, 1], blocked outside.
    t = Tape()
    a = t.leaf(np.array([[[-0.5, 0.5, 1.5]]]), marked=True)
    t.backward(t.reduce_sum(t.clip_st(a)))
    assert t.grad(a).tolist() == [[[0.0, 1.0, 0.0]]]


def test_min_select_ties_to_lowest_index():
    t = Tape()
    a = t.leaf(np.full((1, 1, 1), 2.0), marked=True)
    b = t.leaf(np.full((1, 1, 1), 2.0), marked=True)
    root = t.min_select([t.reduce_sum(a), t.reduce_sum(b)])
    assert t.value(root) == 2.0
    t.backward(root)
    assert t.grad(a) is not None and t.grad(b) is None


def test_min_select_routes_gradient(rng):
    t = Tape()
    a = t.leaf(np.full((1, 1, 1), 5.0), marked=True)
    b = t.leaf(np.full((1, 1, 1), 1.0), marked=True)
    t.backward(t.min_select([t.reduce_sum(a), t.reduce_sum(b)]))
    assert t.grad(a) is None and np.asarray(t.grad(b)).ravel()[0] == 1.0


def test_forward_recompute(rng):
    t = Tape()
    a = t.leaf(np.ones((2, 2, 1)))
    root = t.reduce_sum(t.square(a))
    assert t.value(root) == 4.0
    t.set_leaf(a, 2 * np.ones((2, 2, 1)))
    assert t.forward(root) == 16.0


def test_composite_grad(rng):
    op = build_cem(gaussian_kernel(0.8, radius=1), 2, (8, 8))

    def build(t, l):
        proj = t.cem_linear(t.leaky_relu(l), op)
        return t.add(t.mean_l1(t.sub(proj, t.constant(0.2))),
                     t.scale(t.sq_norm(l), 0.01))
    rep = grad_check(build, rng.random((8, 8, 1)) - 0.3)
    assert rep["passed"], rep["max_rel_error"]
