"""Conditioning-input augmentation.

Each transform fires independently with probability 0.2. The camera
prior gets brightness/contrast jitter (+-0.2), a 3x3 box blur, and an
in-plane rotation (+-15 deg, bilinear, zero fill). The range prior only
gets the rotation; photometric jitter is meaningless for depths, and
cells whose interpolation window touches an invalid source cell are
marked invalid rather than blended.
"""

from __future__ import annotations

import numpy as np

P_APPLY = 0.2
MAX_ANGLE_DEG = 15.0
MAX_JITTER = 0.2


def _rotate_bilinear(img, angle_deg):
    """Rotate about the image centre; out-of-frame samples are zero."""
    h, w = img.shape[:2]
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    a = np.deg2rad(angle_deg)
    ca, sa = np.cos(a), np.sin(a)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - cx
    dy = yy - cy
    # inverse map: destination pixel -> source location
    sx = ca * dx + sa * dy + cx
    sy = -sa * dx + ca * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(img, dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ys = y0 + oy
        xs = x0 + ox
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        val = img[ys.clip(0, h - 1), xs.clip(0, w - 1)]
        m = ok * wgt
        out += val * (m[..., None] if img.ndim == 3 else m)
    return out


def _box_blur3(img):
    pad = np.pad(img, ((1, 1), (1, 1)) + ((0, 0),) * (img.ndim - 2),
                 mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += pad[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return acc / 9.0


def augment_image(img, rng):
    """img: [H,W,3] in [0,1]. Returns a new float32 array."""
    out = np.asarray(img, dtype=np.float64).copy()
    if rng.random() < P_APPLY:
        out = out + rng.uniform(-MAX_JITTER, MAX_JITTER)
    if rng.random() < P_APPLY:
        c = rng.uniform(-MAX_JITTER, MAX_JITTER)
        mean = out.mean()
        out = (out - mean) * (1.0 + c) + mean
    if rng.random() < P_APPLY:
        out = _box_blur3(out)
    if rng.random() < P_APPLY:
        out = _rotate_bilinear(out, rng.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_range(depth, rng):
    """depth: [H,W], invalid cells < 0. Rotation only."""
    out = np.asarray(depth, dtype=np.float64).copy()
    if rng.random() < P_APPLY:
        ang = rng.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG)
        valid = (out >= 0.0).astype(np.float64)
        filled = np.where(out >= 0.0, out, 0.0)
        rot = _rotate_bilinear(filled, ang)
        vrot = _rotate_bilinear(valid, ang)
        # keep a cell only if every contributing source sample was valid
        out = np.where(vrot > 0.999, rot, -1.0)
    return out.astype(np.float32)
