"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Design:
  * dynamic graph: every op records its parents and a backward closure on the
    output tensor; backward() walks the graph in reverse topological order and
    accumulates gradients by summation (so calling backward twice doubles
    every gradient).
  * float32 is the training dtype, float64 the gradient-check dtype. Mixing
    dtypes inside one expression raises UsageError; there is no silent
    promotion.
  * broadcasting follows numpy's trailing-dimension rules for elementwise ops
    and is compensated in backward by summing over the broadcast axes.
    matmul requires exact batch-dimension agreement (no batch broadcasting).
  * hot kernels (conv2d, bilinear gathers) dispatch to jointedit.kernels.

Only what the networks need is implemented; this is not a general framework.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError, NumericError, UsageError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (used during sampling)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- graph machinery -----------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward root must be scalar, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return pow_const(self, c)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method aliases
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtype(*ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise UsageError(f"mixed dtypes in one graph: {d0} vs {t.data.dtype}")
    return d0


def _make(data, parents, backward):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes(a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(f"shapes do not broadcast: {a.data.shape} vs {b.data.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_dtype(a, b)
    _binary_shapes(a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_dtype(a, b)
    _binary_shapes(a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_dtype(a, b)
    _binary_shapes(a, b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    _check_dtype(a, b)
    _binary_shapes(a, b)

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bwd)


def neg(a):
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def pow_const(a, c):
    c = float(c)

    def bwd(g):
        return (g * c * np.power(a.data, c - 1),)

    return _make(np.power(a.data, c), (a,), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make(out_data, (a,), bwd)


def log(a):
    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g / (2 * out_data),)

    return _make(out_data, (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1 - out_data * out_data),)

    return _make(out_data, (a,), bwd)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    out_data = out_data.astype(a.data.dtype, copy=False)

    def bwd(g):
        return (g * out_data * (1 - out_data),)

    return _make(out_data, (a,), bwd)


def relu(a):
    def bwd(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0), (a,), bwd)


def leaky_relu(a, slope=0.2):
    mask = a.data > 0

    def bwd(g):
        return (g * np.where(mask, 1.0, slope).astype(a.dtype),)

    return _make(np.where(mask, a.data, slope * a.data).astype(a.dtype), (a,), bwd)


def silu(a):
    return mul(a, sigmoid(a))


def abs_(a):
    def bwd(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bwd)


# -- reductions / shape ------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).astype(a.dtype, copy=False),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]

    def bwd(g):
        if axis is None:
            g2 = np.broadcast_to(g, a.data.shape)
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
            g2 = np.broadcast_to(g2, a.data.shape)
        return ((g2 / n).astype(a.dtype, copy=False),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype), (a,), bwd)


def reshape(a, shape):
    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors, axis=0):
    _check_dtype(*tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        out = []
        sl = [slice(None)] * g.ndim
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def getitem(a, idx):
    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bwd)


def upsample_nearest2d(a, factor):
    """[B,C,H,W] -> [B,C,H*f,W*f] by repetition; backward sums the blocks."""
    f = int(factor)
    b, c, h, w = a.data.shape
    out_data = np.ascontiguousarray(
        np.repeat(np.repeat(a.data, f, axis=2), f, axis=3))

    def bwd(g):
        g = g.reshape(b, c, h, f, w, f)
        return (g.sum(axis=(3, 5)),)

    return _make(out_data, (a,), bwd)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    _check_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul batch dims must match exactly: {a.shape} x {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bwd)


def softmax(a, axis=-1):
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out_data = out_data.astype(a.dtype, copy=False)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _make(out_data, (a,), bwd)


# -- structured kernels ------------------------------------------------------

def conv2d(x, w, stride=1, pad="same"):
    """2-d cross-correlation. x [B,C,H,W], w [O,C,kh,kw].

    pad may be an int or "same" (odd kernels only; with stride 1 "same"
    preserves spatial extent). Output extent (H + 2p - kh)//stride + 1 must be
    positive.
    """
    _check_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d tensors, got {x.shape}, {w.shape}")
    o, cw, kh, kw = w.data.shape
    if x.data.shape[1] != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernels must be odd, got {kh}x{kw}")
    if pad == "same":
        pad = (kh - 1) // 2
    pad = int(pad)
    stride = int(stride)
    b, c, h, wd = x.data.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d non-positive output extent {ho}x{wo} for input {x.data.shape}, kernel {w.data.shape}, stride {stride}, pad {pad}")
    xd = np.ascontiguousarray(x.data)
    wd_ = np.ascontiguousarray(w.data)
    y = kernels.conv2d_fwd(xd, wd_, stride, pad)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_bwd_x(g, wd_, stride, pad, xd.shape) if x.requires_grad else None
        gw = kernels.conv2d_bwd_w(xd, g, stride, pad, wd_.shape) if w.requires_grad else None
        return gx, gw

    return _make(np.asarray(y), (x, w), bwd)


def bilinear_gather(fm, pts):
    """Sample fm [B,C,H,W] at pts [B,N,2] (x, y in index coordinates).

    Returns [B,N,C]. Samples outside the grid see zero padding. A point
    exactly on integer (i, j) returns fm[:, :, j, i]. Differentiable in both
    the feature map and the points.
    """
    _check_dtype(fm, pts)
    if fm.ndim != 4 or pts.ndim != 3 or pts.data.shape[-1] != 2:
        raise DimensionError(f"bilinear_gather shapes: fm {fm.shape}, pts {pts.shape}")
    if fm.data.shape[0] != pts.data.shape[0]:
        raise DimensionError(f"batch mismatch: fm {fm.shape}, pts {pts.shape}")
    fmd = np.ascontiguousarray(fm.data)
    ptsd = np.ascontiguousarray(pts.data)
    out = kernels.bilinear_gather_fwd(fmd, ptsd)

    def bwd(g):
        gfm, gpts = kernels.bilinear_gather_bwd(fmd, ptsd, np.ascontiguousarray(g))
        return gfm, gpts

    return _make(np.asarray(out), (fm, pts), bwd)


# -- losses ------------------------------------------------------------------

def mse(a, b):
    d = sub(a, b)
    return mean(mul(d, d))


def l1(a, b):
    return mean(abs_(sub(a, b)))
