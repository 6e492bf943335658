"""Latent autoencoders for both modalities, plus the range-branch
patch discriminator.

Both VAEs downsample by 4: 64x64 images -> 16x16 latents, 32x64 range
grids -> 8x16 latents, 4 channels each. Outputs pass through a sigmoid,
so inputs are expected in [0, 1] (ranges are normalized by max_range,
invalid cells set to 0).
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .layers import Conv2d, GroupNorm, Module


class _VAE(Module):
    def __init__(self, ch_in, width, z_ch, rng):
        w = width
        self.e0 = Conv2d(ch_in, w, 3, rng)
        self.en0 = GroupNorm(8, w)
        self.e1 = Conv2d(w, w, 3, rng, stride=2)
        self.en1 = GroupNorm(8, w)
        self.e2 = Conv2d(w, 2 * w, 3, rng, stride=2)
        self.en2 = GroupNorm(8, 2 * w)
        self.e_head = Conv2d(2 * w, 2 * z_ch, 3, rng)

        self.d0 = Conv2d(z_ch, 2 * w, 3, rng)
        self.dn0 = GroupNorm(8, 2 * w)
        self.d1 = Conv2d(2 * w, w, 3, rng)
        self.dn1 = GroupNorm(8, w)
        self.d2 = Conv2d(w, w, 3, rng)
        self.dn2 = GroupNorm(8, w)
        self.d_head = Conv2d(w, ch_in, 3, rng)
        self.z_ch = z_ch

    def encode(self, x):
        """x [B,C,H,W] -> (mu, logvar), each [B,z,H/4,W/4]."""
        h = ad.silu(self.en0(self.e0(x)))
        h = ad.silu(self.en1(self.e1(h)))
        h = ad.silu(self.en2(self.e2(h)))
        stats = self.e_head(h)
        mu = stats[:, :self.z_ch]
        logvar = stats[:, self.z_ch:]
        return mu, logvar

    def decode(self, z):
        h = ad.silu(self.dn0(self.d0(z)))
        h = ad.upsample_nearest2d(h, 2)
        h = ad.silu(self.dn1(self.d1(h)))
        h = ad.upsample_nearest2d(h, 2)
        h = ad.silu(self.dn2(self.d2(h)))
        return ad.sigmoid(self.d_head(h))

    @staticmethod
    def reparameterize(mu, logvar, eps):
        """mu + exp(logvar/2) * eps with caller-supplied noise."""
        e = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps), requires_grad=False)
        return mu + ad.exp(logvar * 0.5) * e

    @staticmethod
    def kl(mu, logvar):
        term = logvar + 1.0 - mu * mu - ad.exp(logvar)
        return ad.mean(term) * (-0.5)


class ImageVAE(_VAE):
    def __init__(self, rng, width=32, z_ch=4):
        super().__init__(3, width, z_ch, rng)


class RangeVAE(_VAE):
    def __init__(self, rng, width=32, z_ch=4):
        super().__init__(1, width, z_ch, rng)


class PatchDiscriminator(Module):
    """Three stride-2 convs -> per-patch logits at 1/8 resolution."""

    def __init__(self, rng, ch_in=1):
        self.c0 = Conv2d(ch_in, 32, 3, rng, stride=2)
        self.c1 = Conv2d(32, 64, 3, rng, stride=2)
        self.c2 = Conv2d(64, 1, 3, rng, stride=2)

    def __call__(self, x):
        h = ad.leaky_relu(self.c0(x), 0.2)
        h = ad.leaky_relu(self.c1(h), 0.2)
        return self.c2(h)


def hinge_d_loss(real_logits, fake_logits):
    return ad.mean(ad.relu(1.0 - real_logits)) + ad.mean(ad.relu(1.0 + fake_logits))


def hinge_g_loss(fake_logits):
    return ad.mean(fake_logits) * (-1.0)
