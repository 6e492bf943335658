"""Evaluation metrics: Chamfer distance, depth alignment, PSNR.

All three come in masked variants that restrict scoring to an edit region.
Chamfer and the depth-alignment score work on metric point clouds decoded
from range grids; PSNR works on [0,1] images. Values are plain floats so
reports stay JSON-friendly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .errors import DimensionError, DomainError, NumericError

PSNR_CAP = 99.0


def _points(arr, what):
    p = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if p.size == 0:
        raise DomainError(f"{what} point set is empty")
    if p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"{what} must be [N,3], got {p.shape}")
    return p


def chamfer(a, b):
    """Symmetric mean nearest-neighbour Euclidean distance, in metres.

    0.5 * (mean_a min_b ||a-b|| + mean_b min_a ||a-b||), non-squared.
    """
    pa = _points(a, "first")
    pb = _points(b, "second")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def project_depth(points, calib, shape):
    """Depth image from projecting a cloud: each point lands on its rounded
    pixel, the nearest point per pixel wins, empty pixels hold 0."""
    p = _points(points, "projected")
    h, w = shape
    uv, d, ok = geo.project_to_image(p, calib)
    px = np.round(uv[:, 0]).astype(np.int64)
    py = np.round(uv[:, 1]).astype(np.int64)
    sel = ok & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    buf = np.full((h, w), np.inf, dtype=np.float64)
    np.minimum.at(buf, (py[sel], px[sel]), d[sel])
    return np.where(np.isfinite(buf), buf, 0.0)


def das(points, depth_ref, calib, mask=None):
    """Depth alignment score: MAE in metres between the cloud's projected
    depth image and the reference depth, over pixels covered by both.

    Projection keeps the nearest point per pixel, so occluded points never
    score against a surface in front of them, and points outside the
    evaluation mask change nothing.
    """
    dref = np.asarray(depth_ref, dtype=np.float64)
    if dref.ndim != 2:
        raise DimensionError(f"reference depth must be [H,W], got {dref.shape}")
    dpred = project_depth(points, calib, dref.shape)
    valid = (dpred > 0) & (dref > 0)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != dref.shape:
            raise DimensionError(f"mask {m.shape} vs depth {dref.shape}")
        valid &= m
    if not valid.any():
        raise DomainError("no point projects into the evaluated region")
    return float(np.mean(np.abs(dpred[valid] - dref[valid])))


def psnr(a, b, mask=None):
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB.

    A 2D mask on multichannel images selects whole pixels.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape[:m.ndim]:
            raise DimensionError(f"mask {m.shape} does not index {x.shape}")
        if not m.any():
            raise DomainError("mask selects no pixels")
        diff = x[m] - y[m]
    else:
        diff = x - y
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def masked_points(range_grid, calib, mask):
    """Decode only the range cells inside `mask` to a point cloud."""
    g = np.asarray(range_grid, dtype=np.float32)
    m = np.asarray(mask, dtype=bool)
    if m.shape != g.shape:
        raise DimensionError(f"mask {m.shape} vs grid {g.shape}")
    data = np.where(m, g, geo.INVALID).astype(np.float32)
    return geo.decode_range(geo.RangeImage(data, calib))


def evaluate_sample(pred_image, pred_range, ref_image, ref_range,
                    calib, mask_img=None, mask_rng=None, sample_id=""):
    """All metrics for one (prediction, reference) pair as a flat record.

    The depth-alignment reference is the projection of the reference
    range data, so a prediction equal to its reference scores exactly 0.
    """
    rec = {"id": str(sample_id)}
    rec["psnr"] = psnr(pred_image, ref_image)
    pts_pred = geo.decode_range(
        geo.RangeImage(np.asarray(pred_range, dtype=np.float32), calib))
    pts_ref = geo.decode_range(
        geo.RangeImage(np.asarray(ref_range, dtype=np.float32), calib))
    ref_depth = project_depth(pts_ref, calib, (calib.img_h, calib.img_w))
    rec["cd"] = chamfer(pts_pred, pts_ref)
    rec["das"] = das(pts_pred, ref_depth, calib)
    if mask_img is not None:
        rec["psnr_masked"] = psnr(pred_image, ref_image, mask_img)
        rec["das_masked"] = das(pts_pred, ref_depth, calib, mask_img)
    if mask_rng is not None:
        rec["cd_masked"] = chamfer(masked_points(pred_range, calib, mask_rng),
                                   masked_points(ref_range, calib, mask_rng))
    return rec


@dataclasses.dataclass
class EvalReport:
    """Per-sample metric records plus their arithmetic means."""

    samples: list
    count: int
    aggregates: dict

    @classmethod
    def from_samples(cls, samples):
        recs = list(samples)
        if not recs:
            raise DomainError("a report needs at least one sample")
        keys = [k for k in recs[0] if k != "id"]
        for r in recs:
            if [k for k in r if k != "id"] != keys:
                raise DimensionError("samples carry inconsistent metric sets")
        agg = {k: float(np.mean([r[k] for r in recs])) for k in keys}
        bad = {k: v for k, v in agg.items() if not math.isfinite(v)}
        if bad:
            raise NumericError(f"non-finite aggregate metrics: {bad}")
        return cls(samples=recs, count=len(recs), aggregates=agg)

    def to_json(self, path):
        payload = {"count": self.count, "aggregates": self.aggregates,
                   "samples": self.samples}
        with open(path, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
            f.write("\n")
        return Path(path)

    def to_csv(self, path):
        keys = [k for k in self.samples[0] if k != "id"]
        with open(path, "w") as f:
            f.write("id," + ",".join(keys) + "\n")
            for r in self.samples:
                f.write(r["id"] + ","
                        + ",".join(f"{r[k]:.9g}" for k in keys) + "\n")
            f.write("mean," + ",".join(f"{self.aggregates[k]:.9g}"
                                       for k in keys) + "\n")
        return Path(path)
