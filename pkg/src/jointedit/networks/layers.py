"""Building blocks: parameter containers and small trainable layers.

Parameters are Tensors with requires_grad=True. Frozen weights (surrogate
towers) are Tensors with requires_grad=False; they still appear in
named_tensors() so checkpoints carry them.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import UsageError


class Module:
    """Minimal recursive container with deterministic tensor naming."""

    def _children(self):
        for name in sorted(vars(self)):
            v = getattr(self, name)
            if isinstance(v, (Module, Tensor)):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, e in enumerate(v):
                    if isinstance(e, (Module, Tensor)):
                        yield f"{name}.{i}", e

    def named_tensors(self, prefix=""):
        """All tensors (trainable and frozen), ordered by name."""
        out = {}
        for name, v in self._children():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(v, Tensor):
                out[full] = v
            else:
                out.update(v.named_tensors(full))
        return out

    def named_params(self, prefix=""):
        return {k: v for k, v in self.named_tensors(prefix).items() if v.requires_grad}

    def params(self):
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def load_tensors(self, table, prefix=""):
        """Copy values from {name: ndarray} into matching tensors."""
        own = self.named_tensors(prefix)
        for name, t in own.items():
            if name not in table:
                raise UsageError(f"missing tensor {name!r} in checkpoint table")
            arr = np.asarray(table[name])
            if arr.shape != t.data.shape:
                raise UsageError(
                    f"tensor {name!r}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def checksum(self):
        h = hashlib.sha256()
        for name, t in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())
        return h.hexdigest()


def param(rng, shape, scale):
    return Tensor(rng.normal(0.0, scale, shape).astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False, trainable=True):
        if zero:
            self.w = Tensor(np.zeros((n_in, n_out), np.float32), requires_grad=trainable)
        else:
            self.w = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)).astype(np.float32),
                requires_grad=trainable)
        self.b = Tensor(np.zeros(n_out, np.float32), requires_grad=trainable)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad="same", zero=False,
                 trainable=True):
        self.stride = stride
        self.pad = pad
        if zero:
            w = np.zeros((c_out, c_in, k, k), np.float32)
        else:
            fan = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan), (c_out, c_in, k, k)).astype(np.float32)
        self.w = Tensor(w, requires_grad=trainable)
        self.b = Tensor(np.zeros((c_out, 1, 1), np.float32), requires_grad=trainable)

    def __call__(self, x):
        return ad.conv2d(x, self.w, stride=self.stride, pad=self.pad) + self.b


class GroupNorm(Module):
    def __init__(self, groups, ch, eps=1e-5):
        if ch % groups:
            raise UsageError(f"channels {ch} not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones((ch, 1, 1), np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((ch, 1, 1), np.float32), requires_grad=True)

    def __call__(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = ad.reshape(x, (b, g, c // g * h * w))
        mu = ad.mean(xg, axis=2, keepdims=True)
        d = xg - mu
        var = ad.mean(d * d, axis=2, keepdims=True)
        norm = d / ad.sqrt(var + self.eps)
        out = ad.reshape(norm, (b, c, h, w))
        return out * self.gamma + self.beta


class ResBlock(Module):
    """GN -> SiLU -> conv, with a time-embedding bias between the convs."""

    def __init__(self, ch, temb_dim, rng, groups=8):
        self.n1 = GroupNorm(min(groups, ch), ch)
        self.c1 = Conv2d(ch, ch, 3, rng)
        self.emb = Linear(temb_dim, ch, rng)
        self.n2 = GroupNorm(min(groups, ch), ch)
        self.c2 = Conv2d(ch, ch, 3, rng, zero=True)

    def __call__(self, x, temb):
        h = self.c1(ad.silu(self.n1(x)))
        if temb is not None:
            bias = self.emb(temb)  # [B, ch]
            b, c = bias.shape
            h = h + ad.reshape(bias, (b, c, 1, 1))
        h = self.c2(ad.silu(self.n2(h)))
        return x + h


class TokenInjection(Module):
    """Single-token cross-attention, reduced.

    With one key/value token the attention weights are identically 1, so the
    block collapses to a broadcast value projection added to every spatial
    position. Implementing the reduced form keeps every remaining parameter
    live.
    """

    def __init__(self, token_dim, ch, rng):
        self.v = Linear(token_dim, ch, rng, zero=True)

    def __call__(self, x, token):
        val = self.v(token)  # [B, ch]
        b, c = val.shape
        return x + ad.reshape(val, (b, c, 1, 1))


def sinusoidal_embedding(t, dim):
    """Classic transformer timestep embedding -> float32 [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)


class TimeMLP(Module):
    def __init__(self, dim, rng):
        self.l1 = Linear(dim, dim, rng)
        self.l2 = Linear(dim, dim, rng)

    def __call__(self, temb):
        return self.l2(ad.silu(self.l1(temb)))
