"""Denoising diffusion machinery shared by both branches.

Timesteps are 1-indexed: t runs from 1 to T. alpha_bar(0) = 1 by
definition, which makes the final reverse step (t=1) deterministic.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, l1, mse
from .errors import ConfigError, DimensionError


class NoiseSchedule:
    """Linear beta schedule with cached cumulative products."""

    def __init__(self, timesteps=200, beta_start=1e-4, beta_end=2e-2):
        if timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        self.timesteps = int(timesteps)
        self.betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ConfigError(f"t must lie in [1, {self.timesteps}], got {t}")
        return t

    def beta(self, t):
        return self.betas[self._check_t(t) - 1]

    def alpha(self, t):
        return self.alphas[self._check_t(t) - 1]

    def abar(self, t):
        return self.alpha_bar[self._check_t(t) - 1]

    def abar_prev(self, t):
        t = self._check_t(t)
        return np.where(t > 1, self.alpha_bar[np.maximum(t - 2, 0)], 1.0)

    def to_dict(self):
        return {"timesteps": self.timesteps,
                "beta_start": float(self.betas[0]),
                "beta_end": float(self.betas[-1])}


def q_sample(x0, t, eps, schedule):
    """Forward noising: sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.abar(t)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def predict_x0(xt, eps_hat, t, schedule):
    """Invert q_sample given a noise estimate. Works on Tensors or arrays."""
    ab = schedule.abar(t)
    c1 = float(1.0 / np.sqrt(ab))
    c2 = float(np.sqrt(1.0 - ab) / np.sqrt(ab))
    if isinstance(eps_hat, Tensor) or isinstance(xt, Tensor):
        xt_t = xt if isinstance(xt, Tensor) else Tensor(xt, requires_grad=False)
        eh = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat, requires_grad=False)
        return xt_t * c1 - eh * c2
    return xt * c1 - eps_hat * c2


def ddpm_step(xt, eps_hat, t, schedule, noise=None):
    """One ancestral reverse step from t to t-1 (arrays only).

    noise=None means deterministic (sigma suppressed); the t=1 step is
    deterministic regardless because abar(0) = 1.
    """
    xt = np.asarray(xt)
    eps_hat = np.asarray(eps_hat)
    if xt.shape != eps_hat.shape:
        raise DimensionError(f"xt {xt.shape} vs eps_hat {eps_hat.shape}")
    b = schedule.beta(t)
    a = schedule.alpha(t)
    ab = schedule.abar(t)
    abp = schedule.abar_prev(t)
    mean = (xt - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if noise is None:
        return mean.astype(xt.dtype)
    sigma = np.sqrt(b * (1.0 - abp) / (1.0 - ab))
    # the final step is deterministic: abar(0) = 1 forces sigma(1) = 0
    sigma = np.where(np.asarray(t) > 1, sigma, 0.0)
    return (mean + sigma * np.asarray(noise)).astype(xt.dtype)


def reverse_trajectory(eps_fn, x_init, schedule, rng=None):
    """Run the full reverse chain from t=T down to 1.

    eps_fn(x, t) -> noise prediction array. rng=None runs the
    deterministic (mean-only) chain.
    """
    x = np.asarray(x_init)
    for t in range(schedule.timesteps, 0, -1):
        eps_hat = eps_fn(x, t)
        noise = None if rng is None else rng.standard_normal(x.shape).astype(x.dtype)
        x = ddpm_step(x, eps_hat, t, schedule, noise)
    return x


def recon_loss(eps_hat, eps):
    """Noise-matching MSE."""
    target = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps), requires_grad=False)
    return mse(eps_hat, target)


def refine_loss(x0_hat, x0, feature_fn, n_stages=5):
    """Pixel MSE plus L1 over intermediate feature stages.

    feature_fn maps a Tensor to a list of per-stage feature Tensors and
    must produce exactly n_stages of them.
    """
    target = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0), requires_grad=False)
    total = mse(x0_hat, target)
    f_pred = feature_fn(x0_hat)
    f_true = feature_fn(target)
    if len(f_pred) != n_stages or len(f_true) != n_stages:
        raise ConfigError(
            f"feature extractor must yield {n_stages} stages, got {len(f_pred)}")
    for fp, ft in zip(f_pred, f_true):
        total = total + l1(fp, ft)
    return total


def branch_loss(recon, refine, lam):
    """Weighted branch objective."""
    if lam < 0:
        raise ConfigError(f"refinement weight must be >= 0, got {lam}")
    return recon + refine * float(lam)
