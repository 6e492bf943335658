"""Conditioning inputs shared by training and editing.

Both consumers build the same artifacts from a rendered object prior: an
edit-region mask per modality, pasted composites, a semantic crop, and the
cross-modality correspondence maps at the resolution where the two
denoisers exchange features.
"""

from __future__ import annotations

import math

import numpy as np

from . import geometry as geo
from .errors import DimensionError, PlacementError


def _bbox_with_margin(rows, cols, shape, margin):
    r0, r1 = int(rows.min()), int(rows.max())
    c0, c1 = int(cols.min()), int(cols.max())
    diag = math.hypot(r1 - r0 + 1, c1 - c0 + 1)
    pad = int(math.ceil(margin * diag))
    out = np.zeros(shape, dtype=bool)
    out[max(0, r0 - pad):min(shape[0], r1 + pad + 1),
        max(0, c0 - pad):min(shape[1], c1 + pad + 1)] = True
    return out


def image_mask_from_silhouette(sil, margin=0.12):
    """Edit mask: silhouette bounding box grown by a diagonal margin."""
    s = np.asarray(sil) > 0.5
    rows, cols = np.nonzero(s)
    if rows.size == 0:
        raise PlacementError("object silhouette is empty; prior renders off-screen")
    return _bbox_with_margin(rows, cols, s.shape, margin)


def range_mask_from_depth(depth, calib, margin=0.12):
    """Edit mask on the range grid covering the prior's projected footprint."""
    pts, _, _ = geo.unproject_depth(np.asarray(depth, dtype=np.float64), calib)
    if pts.shape[0] == 0:
        raise PlacementError("prior depth has no valid pixels")
    r, phi, theta = geo.cartesian_to_spherical(pts)
    ok = ((theta >= calib.theta_min) & (theta < calib.theta_max)
          & (phi >= calib.phi_min) & (phi < calib.phi_max) & (r > 0))
    if not ok.any():
        raise PlacementError("prior footprint falls outside the range grid")
    col = np.floor((theta[ok] - calib.theta_min) / calib.theta_step).astype(int)
    row = np.floor((phi[ok] - calib.phi_min) / calib.phi_step).astype(int)
    return _bbox_with_margin(row, col, (calib.n_phi, calib.n_theta), margin)


def compose_image(prior_rgb, sil, mask, background):
    """Pasted camera composite: prior inside the silhouette, black in the
    rest of the edit region, untouched scene outside."""
    s = (np.asarray(sil) > 0.5)[..., None]
    m = np.asarray(mask, dtype=bool)[..., None]
    out = np.where(s, prior_rgb, np.where(m, 0.0, background))
    return out.astype(np.float32)


def compose_range(range_bg, prior_depth, mask, calib, median_k=3):
    """Pasted range composite via depth unprojection into the masked cells."""
    return geo.paste_depth(range_bg, prior_depth, mask, calib, median_k=median_k)


def bilinear_resize(img, out_h, out_w):
    """Plain bilinear resample (half-pixel centers), channels-last or 2D."""
    a = np.asarray(img, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
    h, w, c = a.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    out = out.astype(np.float32)
    return out[..., 0] if squeeze else out


def semantic_crop(image, sil, out_size=64):
    """Square crop of the silhouette bbox, resized for the semantic encoder."""
    s = np.asarray(sil) > 0.5
    rows, cols = np.nonzero(s)
    if rows.size == 0:
        raise PlacementError("cannot crop an empty silhouette")
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    crop = np.asarray(image)[r0:r1, c0:c1]
    return bilinear_resize(crop, out_size, out_size)


def condition_maps(pasted_range, calib, scale=8):
    """Correspondence maps at the feature-exchange resolution.

    Returns (cmap, ref_img, depth_img, valid_img): cmap maps coarse range
    cells into image-latent coordinates; ref_img maps coarse image pixels
    back to range cells (z-buffered) with depth_img carrying the winning
    depth; everything at 1/scale of the native grids.
    """
    if calib.img_h % scale or calib.img_w % scale:
        raise DimensionError(f"image {calib.img_h}x{calib.img_w} not divisible by {scale}")
    cmap = geo.build_correspondence(pasted_range, calib, scale)
    ref_img, depth_img, valid_img = geo.invert_correspondence(
        cmap, (calib.img_h // scale, calib.img_w // scale))
    return cmap, ref_img, depth_img, valid_img
