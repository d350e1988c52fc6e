"""Differentiable primitives.

Each primitive is a small class with a numpy ``forward`` and a ``backward``
expressed through other primitives, which keeps every rule differentiable
again.  Adjoint pairs (``Unfold``/``Fold``, ``TakeLast``/``ScatterLast``,
``Slice``/``SliceGrad``, ``IndexSelect``/``IndexAdd``, ``SumTo``/``BroadcastTo``)
close the set under differentiation.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "matmul", "swap_last",
    "exp", "log", "tanh", "sigmoid", "relu", "sin", "cos", "sqrt", "clamp",
    "sum", "mean", "max", "reshape", "transpose", "broadcast_to", "sum_to",
    "getitem", "concat", "index_select", "index_add", "take_last",
    "scatter_last", "unfold", "fold", "conv2d", "max_pool2d", "avg_pool2d",
    "softmax", "log_softmax", "nll_loss", "where", "stop_gradient",
    "grid_sample", "dot", "record",
]


def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    return a.sum(axis=axes, keepdims=True).reshape(shape)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


# ---------------------------------------------------------------- arithmetic
class Add:
    name = "add"

    @staticmethod
    def forward(a, b):
        return a + b

    @staticmethod
    def backward(g, ins, out, needs):
        a, b = ins
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )


class Sub:
    name = "sub"

    @staticmethod
    def forward(a, b):
        return a - b

    @staticmethod
    def backward(g, ins, out, needs):
        a, b = ins
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(neg(g), b.shape) if needs[1] else None,
        )


class Mul:
    name = "mul"

    @staticmethod
    def forward(a, b):
        return a * b

    @staticmethod
    def backward(g, ins, out, needs):
        a, b = ins
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


class Div:
    name = "div"

    @staticmethod
    def forward(a, b):
        return a / b

    @staticmethod
    def backward(g, ins, out, needs):
        a, b = ins
        ga = _unbroadcast(g / b, a.shape) if needs[0] else None
        gb = _unbroadcast(neg(g * out / b), b.shape) if needs[1] else None
        return ga, gb


class Neg:
    name = "neg"

    @staticmethod
    def forward(a):
        return -a

    @staticmethod
    def backward(g, ins, out, needs):
        return (neg(g),)


class Power:
    name = "power"

    @staticmethod
    def forward(a, k):
        return a**k

    @staticmethod
    def backward(g, ins, out, needs, k):
        (a,) = ins
        if k == 1:
            return (g,)
        return (g * (power(a, k - 1) * k),)


class MatMul:
    name = "matmul"

    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul primitive expects operands with ndim >= 2")
        return np.matmul(a, b)

    @staticmethod
    def backward(g, ins, out, needs):
        a, b = ins
        ga = _unbroadcast(matmul(g, swap_last(b)), a.shape) if needs[0] else None
        gb = _unbroadcast(matmul(swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb


class Transpose:
    name = "transpose"

    @staticmethod
    def forward(a, axes):
        return np.transpose(a, axes)

    @staticmethod
    def backward(g, ins, out, needs, axes):
        return (transpose(g, tuple(np.argsort(axes))),)


class Reshape:
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        return a.reshape(shape)

    @staticmethod
    def backward(g, ins, out, needs, shape):
        return (reshape(g, ins[0].shape),)


class BroadcastTo:
    name = "broadcast"

    @staticmethod
    def forward(a, shape):
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def backward(g, ins, out, needs, shape):
        return (sum_to(g, ins[0].shape),)


class SumTo:
    name = "sum_to"

    @staticmethod
    def forward(a, shape):
        return _sum_to_array(a, shape)

    @staticmethod
    def backward(g, ins, out, needs, shape):
        return (broadcast_to(g, ins[0].shape),)


# ---------------------------------------------------------------- elementwise
class Exp:
    name = "exp"

    @staticmethod
    def forward(a):
        return np.exp(a)

    @staticmethod
    def backward(g, ins, out, needs):
        return (g * out,)


class Log:
    name = "log"

    @staticmethod
    def forward(a):
        return np.log(a)

    @staticmethod
    def backward(g, ins, out, needs):
        return (g / ins[0],)


class Tanh:
    name = "tanh"

    @staticmethod
    def forward(a):
        return np.tanh(a)

    @staticmethod
    def backward(g, ins, out, needs):
        return (g * (1.0 - out * out),)


class Sigmoid:
    name = "sigmoid"

    @staticmethod
    def forward(a):
        # evaluate on -|a| so large inputs never overflow exp
        e = np.exp(-np.abs(a))
        return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    @staticmethod
    def backward(g, ins, out, needs):
        return (g * (out * (1.0 - out)),)


class Relu:
    name = "relu"

    @staticmethod
    def forward(a):
        return np.maximum(a, 0)

    @staticmethod
    def backward(g, ins, out, needs):
        return (g * (ins[0].data > 0).astype(g.dtype),)


class Sin:
    name = "sin"

    @staticmethod
    def forward(a):
        return np.sin(a)

    @staticmethod
    def backward(g, ins, out, needs):
        return (g * cos(ins[0]),)


class Cos:
    name = "cos"

    @staticmethod
    def forward(a):
        return np.cos(a)

    @staticmethod
    def backward(g, ins, out, needs):
        return (neg(g * sin(ins[0])),)


class Sqrt:
    name = "sqrt"

    @staticmethod
    def forward(a):
        return np.sqrt(a)

    @staticmethod
    def backward(g, ins, out, needs):
        return (g / (out * 2.0),)


class Clamp:
    name = "clamp"

    @staticmethod
    def forward(a, lo, hi):
        return np.clip(a, lo, hi)

    @staticmethod
    def backward(g, ins, out, needs, lo, hi):
        a = ins[0].data
        mask = np.ones_like(a)
        if lo is not None:
            mask = mask * (a >= lo)
        if hi is not None:
            mask = mask * (a <= hi)
        return (g * mask.astype(g.dtype),)


class Where:
    name = "where"

    @staticmethod
    def forward(a, b, cond):
        return np.where(cond, a, b)

    @staticmethod
    def backward(g, ins, out, needs, cond):
        a, b = ins
        c = cond.astype(g.dtype)
        return (
            _unbroadcast(g * c, a.shape) if needs[0] else None,
            _unbroadcast(g * (1.0 - c), b.shape) if needs[1] else None,
        )


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum:
    name = "sum"

    @staticmethod
    def forward(a, axis, keepdims):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(g, ins, out, needs, axis, keepdims):
        shape = ins[0].shape
        if not keepdims:
            kshape = tuple(1 if i in axis else s for i, s in enumerate(shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, shape),)


class Max:
    """Maximum along one axis; gradient goes to the first maximal entry."""

    name = "max"

    @staticmethod
    def forward(a, axis, keepdims):
        return np.max(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(g, ins, out, needs, axis, keepdims):
        a = ins[0].data
        idx = np.expand_dims(np.argmax(a, axis=axis), axis)
        mask = np.zeros_like(a)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        if not keepdims:
            g = reshape(g, tuple(1 if i == axis else s for i, s in enumerate(a.shape)))
        return (g * mask,)


# ---------------------------------------------------------------- indexing
class Slice:
    name = "slice"

    @staticmethod
    def forward(a, key):
        return np.array(a[key])

    @staticmethod
    def backward(g, ins, out, needs, key):
        return (SliceGrad.apply(g, key=key, shape=ins[0].shape),)


class SliceGrad:
    name = "slice_grad"

    @staticmethod
    def forward(g, key, shape):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        return out

    @staticmethod
    def backward(g, ins, out, needs, key, shape):
        return (apply(Slice, g, key=key),)

    @classmethod
    def apply(cls, g, key, shape):
        return apply(cls, g, key=key, shape=shape)


class Concat:
    name = "concat"

    @staticmethod
    def forward(*arrays, axis):
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(g, ins, out, needs, axis):
        grads = []
        start = 0
        ax = axis % g.ndim
        for t, need in zip(ins, needs):
            stop = start + t.shape[ax]
            if need:
                key = (slice(None),) * ax + (slice(start, stop),)
                grads.append(apply(Slice, g, key=key))
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


class IndexSelect:
    name = "index_select"

    @staticmethod
    def forward(a, idx):
        return a[idx]

    @staticmethod
    def backward(g, ins, out, needs, idx):
        return (index_add(g, idx, ins[0].shape[0]),)


class IndexAdd:
    name = "index_add"

    @staticmethod
    def forward(g, idx, n):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, idx, g)
        return out

    @staticmethod
    def backward(g, ins, out, needs, idx, n):
        return (index_select(g, idx),)


class TakeLast:
    """``out[b, c, p] = a[b, c, idx[b, p]]``."""

    name = "take_last"

    @staticmethod
    def forward(a, idx):
        return np.take_along_axis(a, idx[:, None, :], axis=2)

    @staticmethod
    def backward(g, ins, out, needs, idx):
        return (scatter_last(g, idx, ins[0].shape[2]),)


class ScatterLast:
    """Adjoint of :class:`TakeLast`: scatter-add along the last axis."""

    name = "scatter_last"

    @staticmethod
    def forward(g, idx, n):
        b, c, p = g.shape
        flat = (idx[:, None, :] + (np.arange(b * c).reshape(b, c, 1) * n)).reshape(-1)
        out = np.bincount(flat, weights=g.reshape(-1).astype(np.float64), minlength=b * c * n)
        return out.reshape(b, c, n).astype(g.dtype)

    @staticmethod
    def backward(g, ins, out, needs, idx, n):
        return (take_last(g, idx),)


# ---------------------------------------------------------------- image ops
def _unfold_array(x, k, pad):
    b, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(b, c * k * k, ho * wo)


def _fold_array(cols, k, pad, shape):
    b, c, h, w = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + ho, j : j + wo] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


class Unfold:
    """im2col for stride-1 square kernels: (B,C,H,W) -> (B, C*k*k, Ho*Wo)."""

    name = "unfold"

    @staticmethod
    def forward(x, k, pad):
        if x.ndim != 4:
            raise ValueError("unfold expects a (B, C, H, W) array")
        return _unfold_array(x, k, pad)

    @staticmethod
    def backward(g, ins, out, needs, k, pad):
        return (fold(g, k, pad, ins[0].shape),)


class Fold:
    name = "fold"

    @staticmethod
    def forward(cols, k, pad, shape):
        return _fold_array(cols, k, pad, shape)

    @staticmethod
    def backward(g, ins, out, needs, k, pad, shape):
        return (unfold(g, k, pad),)


# ---------------------------------------------------------------- losses
class LogSoftmax:
    name = "log_softmax"

    @staticmethod
    def forward(a, axis):
        m = np.max(a, axis=axis, keepdims=True)
        z = a - m
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    @staticmethod
    def backward(g, ins, out, needs, axis):
        return (g - exp(out) * sum(g, axis=axis, keepdims=True),)


class Softmax:
    name = "softmax"

    @staticmethod
    def forward(a, axis):
        m = np.max(a, axis=axis, keepdims=True)
        e = np.exp(a - m)
        return e / e.sum(axis=axis, keepdims=True)

    @staticmethod
    def backward(g, ins, out, needs, axis):
        return (out * (g - sum(g * out, axis=axis, keepdims=True)),)


class NLLLoss:
    """Mean negative log-likelihood of integer targets given log-probabilities."""

    name = "nll_loss"

    @staticmethod
    def forward(logp, labels):
        n = logp.shape[0]
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logp.dtype)

    @staticmethod
    def backward(g, ins, out, needs, labels):
        logp = ins[0].data
        n = logp.shape[0]
        w = np.zeros_like(logp)
        w[np.arange(n), labels] = -1.0 / n
        return (g * w,)


# ---------------------------------------------------------------- public API
def add(a, b):
    return apply(Add, a, b)


def sub(a, b):
    return apply(Sub, a, b)


def mul(a, b):
    return apply(Mul, a, b)


def div(a, b):
    return apply(Div, a, b)


def neg(a):
    return apply(Neg, a)


def power(a, k):
    return apply(Power, a, k=k)


def matmul(a, b):
    """Matrix product; 1-D operands are treated as row/column vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    return apply(MatMul, a, b)


def swap_last(a):
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def transpose(a, axes):
    return apply(Transpose, a, axes=tuple(axes))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    return apply(Reshape, a, shape=shape)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    return a if a.shape == shape else apply(BroadcastTo, a, shape=shape)


def sum_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    return a if a.shape == shape else apply(SumTo, a, shape=shape)


def exp(a):
    return apply(Exp, a)


def log(a):
    return apply(Log, a)


def tanh(a):
    return apply(Tanh, a)


def sigmoid(a):
    return apply(Sigmoid, a)


def relu(a):
    return apply(Relu, a)


def sin(a):
    return apply(Sin, a)


def cos(a):
    return apply(Cos, a)


def sqrt(a):
    return apply(Sqrt, a)


def clamp(a, lo=None, hi=None):
    return apply(Clamp, a, lo=lo, hi=hi)


def where(cond, a, b):
    return apply(Where, a, b, cond=np.asarray(cond, dtype=bool))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    return apply(Sum, a, axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def max(a, axis=-1, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    return apply(Max, a, axis=axis % a.ndim, keepdims=keepdims)


def dot(a, b):
    """Inner product of two equally shaped tensors."""
    return sum(mul(a, b))


def getitem(a, key):
    if isinstance(key, (np.ndarray, list)):
        return index_select(a, np.asarray(key))
    return apply(Slice, a, key=key)


def concat(tensors, axis=0):
    return apply(Concat, *tensors, axis=axis)


def index_select(a, idx):
    """Rows ``a[idx]`` along the first axis."""
    return apply(IndexSelect, a, idx=np.asarray(idx, dtype=np.intp))


def index_add(g, idx, n):
    return apply(IndexAdd, g, idx=np.asarray(idx, dtype=np.intp), n=int(n))


def _check_gather(name, a, idx):
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"{name}: expected (B, C, N) values and (B, P) indices, got {a.shape} and {idx.shape}")


def take_last(a, idx):
    """``out[b, c, p] = a[b, c, idx[b, p]]`` (indices shared across channels)."""
    a, idx = as_tensor(a), np.asarray(idx, dtype=np.intp)
    _check_gather("take_last", a, idx)
    return apply(TakeLast, a, idx=idx)


def scatter_last(g, idx, n):
    """Adjoint of :func:`take_last`: (B, C, P) values added into (B, C, n)."""
    g, idx = as_tensor(g), np.asarray(idx, dtype=np.intp)
    _check_gather("scatter_last", g, idx)
    return apply(ScatterLast, g, idx=idx, n=int(n))


def unfold(x, k, pad=0):
    return apply(Unfold, x, k=int(k), pad=int(pad))


def fold(cols, k, pad, shape):
    return apply(Fold, cols, k=int(k), pad=int(pad), shape=tuple(shape))


def conv2d(x, weight, bias=None, pad=0):
    """Stride-1 2-D convolution (cross-correlation) via im2col."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = unfold(x, k, pad)
    out = matmul(reshape(weight, (o, c * k * k)), cols)
    if bias is not None:
        out = out + reshape(bias, (1, o, 1))
    return reshape(out, (b, o, ho, wo))


def _pool_windows(x, size):
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"pool2d: spatial size {(h, w)} not divisible by {size}")
    x = reshape(x, (b, c, h // size, size, w // size, size))
    x = transpose(x, (0, 1, 2, 4, 3, 5))
    return reshape(x, (b, c, h // size, w // size, size * size))


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; ties route gradient to the lowest index."""
    return max(_pool_windows(x, size), axis=-1)


def avg_pool2d(x, size=2):
    return mean(_pool_windows(x, size), axis=-1)


def softmax(a, axis=-1):
    return apply(Softmax, a, axis=axis)


def log_softmax(a, axis=-1):
    return apply(LogSoftmax, a, axis=axis)


def nll_loss(logp, labels):
    labels = np.asarray(labels, dtype=np.intp)
    return apply(NLLLoss, logp, labels=labels)


def stop_gradient(a):
    return Tensor(as_tensor(a).data)


def grid_sample(x, sx, sy):
    """Bilinear sampling of ``x`` at per-image source coordinates.

    ``x`` has shape (B, C, H, W); ``sx`` and ``sy`` have shape (B, H*W) and
    hold pixel-unit source coordinates for every output pixel (row-major).
    Samples outside the canvas read zeros.  Differentiable in ``x``, ``sx``
    and ``sy``.
    """
    x, sx, sy = as_tensor(x), as_tensor(sx), as_tensor(sy)
    b, c, h, w = x.shape
    flat = reshape(x, (b, c, h * w))
    x0 = np.floor(sx.data)
    y0 = np.floor(sy.data)
    fx = sx - x0
    fy = sy - y0
    out = None
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            xi = (x0 + dx).astype(np.intp)
            yi = (y0 + dy).astype(np.intp)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            weight = wx * wy * valid.astype(x.dtype)
            term = take_last(flat, idx) * reshape(weight, (b, 1, h * w))
            out = term if out is None else out + term
    return reshape(out, (b, c, h, w))


_BY_NAME = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "conv2d": conv2d, "max_pool2d": max_pool2d, "avg_pool2d": avg_pool2d,
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log,
    "softmax": softmax, "log_softmax": log_softmax, "nll_loss": nll_loss,
    "broadcast": broadcast_to, "reshape": reshape, "slice": getitem,
    "concat": concat, "grid_sample": grid_sample, "clamp": clamp,
    "sum": sum, "mean": mean, "neg": neg, "sin": sin, "cos": cos,
}


def record(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name, e.g. ``record("add", a, b)``."""
    try:
        fn = _BY_NAME[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)
