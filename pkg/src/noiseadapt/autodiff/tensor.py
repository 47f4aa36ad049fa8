"""Dense float64 tensors with a reverse-mode tape.

Everything is 64-bit: the project's primary correctness oracle is central
finite differences, which is not reliable at float32. Ops record a backward
closure on the result when gradient tracking is enabled and any input
requires a gradient. The tape is single-use: a second backward through the
same graph raises DoubleBackward.

Thread model: tracking mode is thread-local; independent graphs may be built
and differentiated in parallel threads, a single graph is single-threaded.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import (
    DoubleBackward,
    NonFiniteValue,
    NotScalarLoss,
    ShapeMismatch,
)

_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class _GradMode:
    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = self._enabled
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def no_grad() -> _GradMode:
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


class Tensor:
    """A float64 array plus optional tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_consumed", "_n_saved")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self._n_saved = 0

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{op} produced NaN/Inf")


def _from_op(data, parents, backward, op: str, n_saved: int = 0) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._n_saved = int(n_saved)
    return out


def _acc(grads: dict, node: Tensor, g: np.ndarray):
    if not node.requires_grad:
        return
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = np.asarray(g, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted cotangent back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- backward engine --------------------------------------------------------

def _topo(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # parents precede consumers


def _execute(order: list, root: Tensor, seed: np.ndarray):
    grads = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            node._consumed = True
            node._backward(g, grads)
            node._backward = None


def backward(loss: Tensor) -> dict:
    """Run reverse-mode accumulation from a scalar loss.

    Populates .grad on every reachable tensor with requires_grad and returns
    a map id(tensor) -> gradient array for those tensors.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise NotScalarLoss("backward requires a scalar Tensor loss")
    order = _topo(loss)
    for node in order:
        if node._consumed:
            raise DoubleBackward("tape already consumed by a previous backward")
    _execute(order, loss, np.ones_like(loss.data))
    return {id(n): Tensor(n.grad) for n in order if n.requires_grad and n.grad is not None}


def _seed_backward(root: Tensor, seed: np.ndarray):
    """Backward with an explicit output cotangent (used by checkpoint replay)."""
    order = _topo(root)
    _execute(order, root, np.asarray(seed, dtype=np.float64).reshape(root.shape))


def graph_saved_values(root: Tensor) -> int:
    """Total element count retained by backward closures reachable from root."""
    return sum(n._n_saved for n in _topo(root))


# -- elementwise ops --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g, grads):
        _acc(grads, a, _unbroadcast(g, a.shape))
        _acc(grads, b, _unbroadcast(g, b.shape))

    return _from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g, grads):
        _acc(grads, a, _unbroadcast(g, a.shape))
        _acc(grads, b, _unbroadcast(-g, b.shape))

    return _from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def bw(g, grads):
        _acc(grads, a, _unbroadcast(g * bd, a.shape))
        _acc(grads, b, _unbroadcast(g * ad, b.shape))

    return _from_op(ad * bd, (a, b), bw, "mul", n_saved=ad.size + bd.size)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def bw(g, grads):
        _acc(grads, a, _unbroadcast(g / bd, a.shape))
        _acc(grads, b, _unbroadcast(-g * ad / (bd * bd), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = ad / bd  # non-finite results raise in _from_op
    return _from_op(out_data, (a, b), bw, "div", n_saved=ad.size + bd.size)


def neg(a) -> Tensor:
    a = _lift(a)

    def bw(g, grads):
        _acc(grads, a, -g)

    return _from_op(-a.data, (a,), bw, "neg")


def pow_scalar(a, exponent: float) -> Tensor:
    a = _lift(a)
    e = float(exponent)
    ad = a.data

    def bw(g, grads):
        _acc(grads, a, g * e * ad ** (e - 1.0))

    return _from_op(ad ** e, (a,), bw, "pow", n_saved=ad.size)


def square(a) -> Tensor:
    a = _lift(a)
    ad = a.data

    def bw(g, grads):
        _acc(grads, a, 2.0 * g * ad)

    return _from_op(ad * ad, (a,), bw, "square", n_saved=ad.size)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def bw(g, grads):
        _acc(grads, a, g / (2.0 * out_data))

    return _from_op(out_data, (a,), bw, "sqrt", n_saved=out_data.size)


def tabs(a) -> Tensor:
    a = _lift(a)
    ad = a.data

    def bw(g, grads):
        # subgradient at 0 is fixed to 0 (np.sign(0) == 0)
        _acc(grads, a, g * np.sign(ad))

    return _from_op(np.abs(ad), (a,), bw, "abs", n_saved=ad.size)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def bw(g, grads):
        _acc(grads, a, g * out_data)

    return _from_op(out_data, (a,), bw, "exp", n_saved=out_data.size)


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def bw(g, grads):
        _acc(grads, a, g * (1.0 - out_data * out_data))

    return _from_op(out_data, (a,), bw, "tanh", n_saved=out_data.size)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate exp only on the side where it cannot overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out_data = _stable_sigmoid(a.data)

    def bw(g, grads):
        _acc(grads, a, g * out_data * (1.0 - out_data))

    return _from_op(out_data, (a,), bw, "sigmoid", n_saved=out_data.size)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def bw(g, grads):
        _acc(grads, a, g * mask)

    return _from_op(np.where(mask, a.data, 0.0), (a,), bw, "relu", n_saved=mask.size)


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def bw(g, grads):
        _acc(grads, a, g * np.where(mask, 1.0, alpha))

    return _from_op(np.where(mask, a.data, alpha * a.data), (a,), bw,
                    "leaky_relu", n_saved=mask.size)


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth relu-like activation, safe for FD gradient checks."""
    a = _lift(a)
    s = _stable_sigmoid(a.data)
    ad = a.data

    def bw(g, grads):
        _acc(grads, a, g * (s + ad * s * (1.0 - s)))

    return _from_op(ad * s, (a,), bw, "silu", n_saved=2 * ad.size)


# -- reductions -------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    in_shape = a.shape

    def bw(g, grads):
        if axis is None:
            gx = np.broadcast_to(g.reshape(() if not keepdims else g.shape), in_shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gg, in_shape)
        _acc(grads, a, np.ascontiguousarray(gx))

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= in_shape[ax]

    def bw(g, grads):
        if axis is None:
            gx = np.broadcast_to(g.reshape(() if not keepdims else g.shape), in_shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gg, in_shape)
        _acc(grads, a, np.ascontiguousarray(gx) / count)

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean")


# -- shape ops --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    in_shape = a.shape

    def bw(g, grads):
        _acc(grads, a, g.reshape(in_shape))

    return _from_op(a.data.reshape(shape), (a,), bw, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, grads):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(grads, t, piece)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return _from_op(data, tuple(tensors), bw, "concat")


def tslice(a, idx) -> Tensor:
    a = _lift(a)
    in_shape = a.shape

    def bw(g, grads):
        gx = np.zeros(in_shape)
        gx[idx] = g
        _acc(grads, a, gx)

    return _from_op(a.data[idx], (a,), bw, "slice")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, grads):
        _acc(grads, a, g @ bd.T)
        _acc(grads, b, ad.T @ g)

    return _from_op(ad @ bd, (a, b), bw, "matmul", n_saved=ad.size + bd.size)


# -- convolution and spatial ops -------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, ho, wo, kh, kw) -> (n, ho*wo, c*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    g6 = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[..., i, j]
    if pad:
        gx = gx[:, :, pad:h + pad, pad:w + pad]
    return gx


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation) with square stride/padding."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d expects NCHW input and OIHW weight")
    co, ci, kh, kw = weight.shape
    if x.shape[1] != ci:
        raise ShapeMismatch(f"conv2d channels: input {x.shape[1]} vs weight {ci}")
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeMismatch("conv2d kernel larger than padded input")
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (co,):
            raise ShapeMismatch(f"conv2d bias shape {bias.shape} != ({co},)")
        parents.append(bias)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = cols @ wmat.T  # (n, ho*wo, co)
    if bias is not None:
        out = out + bias.data
    n = x.shape[0]
    out = out.transpose(0, 2, 1).reshape(n, co, ho, wo)
    x_shape = x.shape

    def bw(g, grads):
        gr = g.reshape(n, co, ho * wo).transpose(0, 2, 1)  # (n, p, co)
        if bias is not None:
            _acc(grads, bias, gr.sum(axis=(0, 1)))
        gw = np.tensordot(gr, cols, axes=([0, 1], [0, 1]))  # (co, ci*kh*kw)
        _acc(grads, weight, gw.reshape(weight.shape))
        gcols = gr @ wmat  # (n, p, ci*kh*kw)
        _acc(grads, x, _col2im(gcols, x_shape, kh, kw, stride, pad, ho, wo))

    return _from_op(out, tuple(parents), bw, "conv2d",
                    n_saved=cols.size + wmat.size)


def avg_pool2d(x, k: int) -> Tensor:
    x = _lift(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g, grads):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _acc(grads, x, gx)

    return _from_op(out, (x,), bw, "avg_pool")


def upsample_nearest(x, factor: int) -> Tensor:
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeMismatch("upsample_nearest expects NCHW input")
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.shape

    def bw(g, grads):
        gx = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        _acc(grads, x, gx)

    return _from_op(out, (x,), bw, "upsample")
