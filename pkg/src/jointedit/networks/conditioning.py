"""Conditioning networks: frozen feature surrogates, semantic tokens, and
depth-guided deformable cross-modality attention.

The deformable block is built so that at initialization it reproduces a
plain bilinear lookup of the value projection at the geometric reference
points, bit for bit: offsets come from a zero conv (exact zeros), the K
sampling-point logits come from a zero conv (softmax gives exactly 1/K for
K a power of two), and the weighted sum is evaluated as a balanced pairwise
tree so multiplying by 2^-2 and summing stays exact in floats.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import DimensionError, UsageError
from .layers import Conv2d, Linear, Module


class FrozenTower(Module):
    """Stack of stride-2 convs with fixed random weights."""

    def __init__(self, ch_in, widths, seed):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0]))
        self.convs = []
        c = ch_in
        for w in widths:
            self.convs.append(Conv2d(c, w, 3, rng, stride=2, trainable=False))
            c = w

    def stages(self, x):
        out = []
        h = x
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), 0.2)
            out.append(h)
        return out


class FeatureExtractor(Module):
    """Frozen multi-stage feature pyramid for perceptual-style losses."""

    def __init__(self, ch_in, seed, widths=(16, 32, 64, 128, 128)):
        self.tower = FrozenTower(ch_in, widths, seed)
        self.n_stages = len(widths)

    def __call__(self, x):
        return self.tower.stages(x)


class SemanticEncoder(Module):
    """Frozen random embedding tower: 64x64 rgb crop -> [B, dim]."""

    def __init__(self, seed, dim=128):
        self.tower = FrozenTower(3, (16, 32, 64, dim), seed)
        self.dim = dim

    def __call__(self, crop):
        h = self.tower.stages(crop)[-1]          # [B, dim, 4, 4]
        return ad.mean(h, axis=(2, 3))           # [B, dim]


class SemanticHead(Module):
    """Trainable per-branch projection of the frozen embedding."""

    def __init__(self, dim, rng):
        self.l1 = Linear(dim, dim, rng)
        self.l2 = Linear(dim, dim, rng)

    def __call__(self, emb):
        return self.l2(ad.silu(self.l1(emb)))


class ExchangeMaps:
    """Batched geometric references for both attention directions."""

    __slots__ = ("ref_rng", "depth_rng", "valid_rng",
                 "ref_img", "depth_img", "valid_img", "max_range")

    def __init__(self, ref_rng, depth_rng, valid_rng,
                 ref_img, depth_img, valid_img, max_range):
        self.ref_rng = np.ascontiguousarray(ref_rng, dtype=np.float32)
        self.depth_rng = np.ascontiguousarray(depth_rng, dtype=np.float32)
        self.valid_rng = np.ascontiguousarray(valid_rng, dtype=bool)
        self.ref_img = np.ascontiguousarray(ref_img, dtype=np.float32)
        self.depth_img = np.ascontiguousarray(depth_img, dtype=np.float32)
        self.valid_img = np.ascontiguousarray(valid_img, dtype=bool)
        self.max_range = float(max_range)

    @classmethod
    def from_condition_maps(cls, items, max_range):
        """items: list of (cmap, ref_img, depth_img, valid_img) per sample."""
        refs_r, d_r, v_r, refs_i, d_i, v_i = [], [], [], [], [], []
        for cmap, ref_img, depth_img, valid_img in items:
            refs_r.append(np.stack([cmap.u, cmap.v], axis=-1))
            d_r.append(cmap.d)
            v_r.append(cmap.valid)
            refs_i.append(ref_img)
            d_i.append(depth_img)
            v_i.append(valid_img)
        return cls(np.stack(refs_r), np.stack(d_r), np.stack(v_r),
                   np.stack(refs_i), np.stack(d_i), np.stack(v_i), max_range)


class DeformableCrossAttention(Module):
    """Gather features from the other modality around projected references.

    Query features predict K offsets and K mixing logits from themselves plus
    a normalized-depth channel; samples are bilinear lookups in the source
    feature map. Invalid references produce exactly zero output.
    """

    def __init__(self, ch, rng, k_points=4):
        if k_points & (k_points - 1):
            raise UsageError(f"k_points must be a power of two, got {k_points}")
        self.k = k_points
        self.value = Conv2d(ch, ch, 1, rng)
        self.offset = Conv2d(ch + 1, 2 * k_points, 1, rng, zero=True)
        self.logit = Conv2d(ch + 1, k_points, 1, rng, zero=True)

    def __call__(self, zq, zs, ref, depth_norm, valid):
        b, c, hq, wq = zq.shape
        if ref.shape != (b, hq, wq, 2):
            raise DimensionError(f"ref {ref.shape} does not match query {zq.shape}")
        n = hq * wq
        dt = zq.data.dtype  # geometry constants follow the feature dtype
        dch = Tensor(depth_norm.reshape(b, 1, hq, wq).astype(dt))
        x = ad.concat([zq, dch], axis=1)
        off = self.offset(x)                                  # [B, 2K, Hq, Wq]
        off = ad.reshape(off, (b, self.k, 2, hq, wq))
        off = ad.transpose(off, (0, 1, 3, 4, 2))              # [B, K, Hq, Wq, 2]
        off = ad.reshape(off, (b, self.k, n, 2))
        logits = self.logit(x)                                # [B, K, Hq, Wq]
        weights = ad.softmax(logits, axis=1)
        v = self.value(zs)
        ref_t = Tensor(ref.reshape(b, n, 2).astype(dt))

        terms = []
        for k in range(self.k):
            pts = ref_t + off[:, k]                           # [B, N, 2]
            s = ad.bilinear_gather(v, pts)                    # [B, N, C]
            s = ad.reshape(ad.transpose(s, (0, 2, 1)), (b, c, hq, wq))
            w_k = ad.reshape(weights[:, k], (b, 1, hq, wq))
            terms.append(s * w_k)
        # balanced pairwise reduction keeps the uniform-weight case exact
        while len(terms) > 1:
            terms = [terms[i] + terms[i + 1] for i in range(0, len(terms), 2)]
        out = terms[0]
        mask = Tensor(valid.reshape(b, 1, hq, wq).astype(dt))
        return out * mask


class CrossModalityExchange(Module):
    """Bidirectional deformable attention with zero-initialized tanh gates.

    Both directions read the pre-update features of the other branch; the
    per-branch gates start at tanh(0) = 0 so training begins with two
    decoupled denoisers.
    """

    def __init__(self, ch, rng, k_points=4):
        self.rng_from_img = DeformableCrossAttention(ch, rng, k_points)
        self.img_from_rng = DeformableCrossAttention(ch, rng, k_points)
        self.alpha_img = Tensor(np.zeros((), np.float32), requires_grad=True)
        self.alpha_rng = Tensor(np.zeros((), np.float32), requires_grad=True)

    def __call__(self, z_img, z_rng, maps: ExchangeMaps, force_zero_gates=False):
        if force_zero_gates:
            return z_img, z_rng
        d_r = maps.depth_rng / maps.max_range
        d_i = maps.depth_img / maps.max_range
        upd_rng = self.rng_from_img(z_rng, z_img, maps.ref_rng, d_r, maps.valid_rng)
        upd_img = self.img_from_rng(z_img, z_rng, maps.ref_img, d_i, maps.valid_img)
        z_img_out = z_img + ad.tanh(self.alpha_img) * upd_img
        z_rng_out = z_rng + ad.tanh(self.alpha_rng) * upd_rng
        return z_img_out, z_rng_out
