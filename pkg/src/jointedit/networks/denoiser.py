"""Per-branch denoising U-Nets and the joint wrapper that exchanges
features between them at the bottleneck.

Each branch takes the noisy latent concatenated with its conditioning
stack (pasted-composite latent mean + downsampled edit mask), one shared
timestep embedding, and a semantic token injected at both encoder scales.
The joint model runs both encoders, exchanges bottleneck features through
deformable cross-attention (both directions read pre-update features),
then decodes each branch.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import DimensionError
from .conditioning import CrossModalityExchange, SemanticHead
from .layers import (Conv2d, GroupNorm, Module, ResBlock, TimeMLP,
                     TokenInjection, sinusoidal_embedding)


class Denoiser(Module):
    def __init__(self, rng, z_ch=4, cond_ch=5, width=32, temb_dim=64,
                 token_dim=128):
        w = width
        self.temb_dim = temb_dim
        self.conv_in = Conv2d(z_ch + cond_ch, w, 3, rng)
        self.time = TimeMLP(temb_dim, rng)
        self.head = SemanticHead(token_dim, rng)
        self.enc1 = ResBlock(w, temb_dim, rng)
        self.tok1 = TokenInjection(token_dim, w, rng)
        self.down = Conv2d(w, 2 * w, 3, rng, stride=2)
        self.enc2 = ResBlock(2 * w, temb_dim, rng)
        self.tok2 = TokenInjection(token_dim, 2 * w, rng)
        self.mid = ResBlock(2 * w, temb_dim, rng)
        self.up = Conv2d(2 * w, w, 3, rng)
        self.fuse = Conv2d(2 * w, w, 3, rng)
        self.dec = ResBlock(w, temb_dim, rng)
        self.out_norm = GroupNorm(8, w)
        self.out_conv = Conv2d(w, z_ch, 3, rng, zero=True)
        self.width = w
        self.z_ch = z_ch
        self.cond_ch = cond_ch

    def embed_time(self, t, batch):
        t_arr = np.full(batch, t, dtype=np.float64) if np.isscalar(t) else np.asarray(t)
        emb = sinusoidal_embedding(t_arr, self.temb_dim)
        # follow the parameter dtype so the whole branch can run in float64
        return self.time(Tensor(emb.astype(self.time.l1.w.data.dtype, copy=False)))

    def encode_mid(self, z_t, cond, temb, token_emb):
        """Run encoder + bottleneck. Returns (mid, skip) features."""
        if z_t.shape[1] != self.z_ch or cond.shape[1] != self.cond_ch:
            raise DimensionError(
                f"expected {self.z_ch}+{self.cond_ch} channels, got {z_t.shape} and {cond.shape}")
        token = self.head(token_emb)
        x = self.conv_in(ad.concat([z_t, cond], axis=1))
        h1 = self.tok1(self.enc1(x, temb), token)
        h2 = self.enc2(self.down(h1), temb)
        h2 = self.tok2(h2, token)
        mid = self.mid(h2, temb)
        return mid, h1, token

    def decode_out(self, mid, skip, temb):
        u = self.up(ad.upsample_nearest2d(mid, 2))
        x = self.fuse(ad.concat([u, skip], axis=1))
        x = self.dec(x, temb)
        return self.out_conv(ad.silu(self.out_norm(x)))

    def __call__(self, z_t, cond, t, token_emb):
        temb = self.embed_time(t, z_t.shape[0])
        mid, skip, _ = self.encode_mid(z_t, cond, temb, token_emb)
        return self.decode_out(mid, skip, temb)


class JointDenoiser(Module):
    """Two branches + bottleneck exchange. Branch order: (image, range)."""

    def __init__(self, rng, z_ch=4, cond_ch=5, width=32, temb_dim=64,
                 token_dim=128, k_points=4):
        self.image = Denoiser(rng, z_ch, cond_ch, width, temb_dim, token_dim)
        self.range = Denoiser(rng, z_ch, cond_ch, width, temb_dim, token_dim)
        self.exchange = CrossModalityExchange(2 * width, rng, k_points)

    def __call__(self, zi_t, ci, zr_t, cr, t, tok_img, tok_rng, maps,
                 force_zero_gates=False):
        temb_i = self.image.embed_time(t, zi_t.shape[0])
        temb_r = self.range.embed_time(t, zr_t.shape[0])
        mid_i, skip_i, _ = self.image.encode_mid(zi_t, ci, temb_i, tok_img)
        mid_r, skip_r, _ = self.range.encode_mid(zr_t, cr, temb_r, tok_rng)
        mid_i, mid_r = self.exchange(mid_i, mid_r, maps, force_zero_gates)
        eps_i = self.image.decode_out(mid_i, skip_i, temb_i)
        eps_r = self.range.decode_out(mid_r, skip_r, temb_r)
        return eps_i, eps_r
