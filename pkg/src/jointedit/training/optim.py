"""Adam with bias correction and global-norm gradient clipping.

Optimizer state (step count, first/second moments) is exposed as named
tensors so checkpoints can restore it exactly.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, NumericError


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NumericError(f"gradient norm is not finite: {norm}")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.named_params = dict(named_params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.named_params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.named_params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - self.lr * update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.named_params.values():
            p.grad = None

    def state_tensors(self, prefix):
        """Moment tensors plus step counter, named for checkpointing."""
        out = {f"{prefix}.step": np.array([self.step_count], dtype=np.float64)}
        for k in self.named_params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, table, prefix):
        key = f"{prefix}.step"
        if key not in table:
            raise ConfigError(f"optimizer state {key!r} missing from checkpoint")
        self.step_count = int(table[key][0])
        for k in self.named_params:
            self.m[k] = np.asarray(table[f"{prefix}.m.{k}"]).astype(
                self.m[k].dtype, copy=True).reshape(self.m[k].shape)
            self.v[k] = np.asarray(table[f"{prefix}.v.{k}"]).astype(
                self.v[k].dtype, copy=True).reshape(self.v[k].shape)
