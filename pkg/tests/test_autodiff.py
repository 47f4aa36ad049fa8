"""Finite-difference oracles and contract tests for the autodiff engine."""

import numpy as np
import pytest

from noiseadapt import autodiff as ad
from noiseadapt.autodiff import Tensor
from noiseadapt.errors import (
    DoubleBackward,
    NonFiniteValue,
    NotScalarLoss,
    ShapeMismatch,
)

RNG = np.random.default_rng(12345)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def check_grad(build, x: np.ndarray, rtol: float = 1e-6, h: float = 1e-6):
    """build maps a Tensor leaf to a scalar Tensor loss."""
    leaf = Tensor(x.copy(), requires_grad=True)
    loss = build(leaf)
    ad.backward(loss)
    num = numeric_grad(lambda a: build(Tensor(a)).item(), x.copy(), h)
    scale = np.maximum(np.abs(num), 1.0)
    np.testing.assert_allclose(leaf.grad, num, atol=rtol * scale.max())


UNARY_CASES = [
    ("exp", ad.exp, None),
    ("tanh", ad.tanh, None),
    ("sigmoid", ad.sigmoid, None),
    ("silu", ad.silu, None),
    ("square", ad.square, None),
    ("neg", ad.neg, None),
    ("sqrt", ad.sqrt, "positive"),
    ("tabs", ad.tabs, "offset"),
    ("relu", ad.relu, "offset"),
    ("leaky_relu", ad.leaky_relu, "offset"),
]


@pytest.mark.parametrize("name,op,domain", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_op_gradients(name, op, domain):
    x = RNG.standard_normal((3, 4))
    if domain == "positive":
        x = np.abs(x) + 0.5
    elif domain == "offset":
        # keep inputs away from the kink at zero
        x = np.sign(x) * (np.abs(x) + 0.25)
    check_grad(lambda t: ad.tsum(ad.square(op(t))), x)


def test_binary_op_gradients():
    a = RNG.standard_normal((4, 3))
    b = np.abs(RNG.standard_normal((4, 3))) + 0.5
    for op in (ad.add, ad.sub, ad.mul, ad.div):
        check_grad(lambda t: ad.tsum(ad.square(op(t, Tensor(b)))), a)
        check_grad(lambda t: ad.tsum(ad.square(op(Tensor(a), t))), b.copy())


def test_broadcast_gradients():
    a = RNG.standard_normal((4, 3))
    b = RNG.standard_normal((1, 3))
    c = RNG.standard_normal(())
    check_grad(lambda t: ad.tsum(ad.mul(Tensor(a), t)), b)
    check_grad(lambda t: ad.tsum(ad.add(Tensor(a), t)), c)
    # gradient shape follows the leaf, not the broadcast result
    leaf = Tensor(b.copy(), requires_grad=True)
    ad.backward(ad.tsum(ad.mul(Tensor(a), leaf)))
    assert leaf.grad.shape == b.shape


def test_pow_scalar_gradient():
    x = np.abs(RNG.standard_normal((3, 3))) + 0.5
    check_grad(lambda t: ad.tsum(ad.pow_scalar(t, 2.5)), x)


def test_reductions_and_shapes():
    x = RNG.standard_normal((2, 3, 4))
    check_grad(lambda t: ad.tsum(ad.square(ad.tmean(t, axis=1))), x)
    check_grad(lambda t: ad.tsum(ad.square(ad.tsum(t, axis=(0, 2), keepdims=True))), x)
    check_grad(lambda t: ad.tsum(ad.square(ad.reshape(t, (6, 4)))), x)
    check_grad(lambda t: ad.tsum(ad.square(ad.tslice(t, (slice(None), 1)))), x)
    check_grad(lambda t: ad.tsum(ad.square(ad.concat([t, t], axis=2))), x)


def test_matmul_gradient():
    a = RNG.standard_normal((3, 5))
    b = RNG.standard_normal((5, 2))
    check_grad(lambda t: ad.tsum(ad.square(ad.matmul(t, Tensor(b)))), a)
    check_grad(lambda t: ad.tsum(ad.square(ad.matmul(Tensor(a), t))), b)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, pad):
    x = RNG.standard_normal((2, 3, 6, 6))
    w = RNG.standard_normal((4, 3, 3, 3))
    b = RNG.standard_normal(4)
    check_grad(lambda t: ad.tsum(ad.square(
        ad.conv2d(t, Tensor(w), Tensor(b), stride=stride, pad=pad))), x)
    check_grad(lambda t: ad.tsum(ad.square(
        ad.conv2d(Tensor(x), t, Tensor(b), stride=stride, pad=pad))), w)
    check_grad(lambda t: ad.tsum(ad.square(
        ad.conv2d(Tensor(x), Tensor(w), t, stride=stride, pad=pad))), b)


def test_conv2d_matches_direct_convolution():
    x = RNG.standard_normal((1, 2, 5, 5))
    w = RNG.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=0).data
    expected = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_pool_and_upsample_gradients():
    x = RNG.standard_normal((2, 3, 4, 4))
    check_grad(lambda t: ad.tsum(ad.square(ad.avg_pool2d(t, 2))), x)
    check_grad(lambda t: ad.tsum(ad.square(ad.upsample_nearest(t, 2))), x)


def test_upsample_values():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    up = ad.upsample_nearest(Tensor(x), 2).data
    assert up.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(up[0, 0], np.repeat(np.repeat(x[0, 0], 2, 0), 2, 1))


def test_chain_composition_gradient():
    x = RNG.standard_normal((3, 3)) * 0.5

    def f(t):
        h = ad.silu(ad.matmul(t, Tensor(RNG_FIXED_W)))
        return ad.tmean(ad.tabs(ad.sigmoid(h) - 0.3))

    check_grad(f, x)


RNG_FIXED_W = np.random.default_rng(3).standard_normal((3, 3))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NotScalarLoss):
        ad.backward(ad.square(x))


def test_tape_single_use():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.tsum(ad.square(x))
    ad.backward(loss)
    with pytest.raises(DoubleBackward):
        ad.backward(loss)


def test_gradient_accumulates_across_fanout():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x, x)  # both parents are the same node
    ad.backward(ad.tsum(y))
    np.testing.assert_allclose(x.grad, [4.0])


def test_non_finite_forward_raises():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NonFiniteValue):
        ad.div(Tensor(np.array([1.0])), x)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(ad.square(x))
    assert not y.requires_grad
    assert y._backward is None and y._parents == ()


def test_enable_grad_nests_inside_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        with ad.enable_grad():
            loss = ad.tsum(ad.square(x))
        ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * np.ones(3))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_saved_values_accounting():
    x = Tensor(RNG.standard_normal((4, 4)), requires_grad=True)
    y = ad.tsum(ad.square(ad.exp(x)))
    assert ad.graph_saved_values(y) > 0
    with ad.no_grad():
        y2 = ad.tsum(ad.square(ad.exp(x)))
    assert ad.graph_saved_values(y2) == 0
