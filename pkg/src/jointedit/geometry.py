"""Sensor geometry: spherical range images, pinhole projection, and the
correspondence maps that tie the two modalities together.

Conventions (pinned across the package):
  * LiDAR frame: +y forward, +x right, +z up. Azimuth theta is measured from
    +y toward +x, elevation phi from the horizontal plane toward +z:
        x = r cos(phi) sin(theta)
        y = r cos(phi) cos(theta)
        z = r sin(phi)
    so theta = atan2(x, y) and phi = asin(z / r).
  * Camera frame: +z forward, +x right, +y down (v grows downward in the
    image). p_cam = R_CR @ p + t_CR, depth d = p_cam.z,
    u = fx * x_cam / d + cx, v = fy * y_cam / d + cy. Pixel (row i, col j)
    has its centre at (u, v) = (j, i). Points behind the camera are flagged
    invalid, never raised.
  * Range images are [n_phi, n_theta] float32 grids; -1.0 marks an invalid
    cell. Bin (i, j) covers angles [min + i*step, min + (i+1)*step) with the
    representative direction at the bin centre. Colliding points keep the
    minimum range (nearest surface wins).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DimensionError, DomainError, ConfigError

INVALID = -1.0


@dataclasses.dataclass
class Calibration:
    """Camera intrinsics/extrinsics plus the range-grid layout."""
    img_h: int
    img_w: int
    fx: float
    fy: float
    cx: float
    cy: float
    r_cr: np.ndarray  # [3,3] LiDAR -> camera rotation
    t_cr: np.ndarray  # [3]
    n_theta: int
    n_phi: int
    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float
    max_range: float

    def __post_init__(self):
        self.r_cr = np.asarray(self.r_cr, dtype=np.float64)
        self.t_cr = np.asarray(self.t_cr, dtype=np.float64)
        if self.r_cr.shape != (3, 3) or self.t_cr.shape != (3,):
            raise ConfigError(f"extrinsics shapes {self.r_cr.shape}, {self.t_cr.shape}")
        err = np.abs(self.r_cr @ self.r_cr.T - np.eye(3)).max()
        if err > 1e-6:
            raise ConfigError(f"R_CR not orthonormal, |RR^T - I|_inf = {err:.2e}")
        if np.linalg.det(self.r_cr) < 0:
            raise ConfigError("R_CR must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (self.theta_min < self.theta_max and self.phi_min < self.phi_max):
            raise ConfigError("angle ranges must be increasing")
        if self.n_theta < 2 or self.n_phi < 2:
            raise ConfigError("range grid needs at least 2 bins per axis")
        if self.max_range <= 0:
            raise ConfigError("max_range must be positive")

    @property
    def theta_step(self):
        return (self.theta_max - self.theta_min) / self.n_theta

    @property
    def phi_step(self):
        return (self.phi_max - self.phi_min) / self.n_phi

    def bin_centers(self):
        theta = self.theta_min + (np.arange(self.n_theta) + 0.5) * self.theta_step
        phi = self.phi_min + (np.arange(self.n_phi) + 0.5) * self.phi_step
        return phi, theta

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["r_cr"] = self.r_cr.tolist()
        d["t_cr"] = self.t_cr.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "r_cr": np.array(d["r_cr"]), "t_cr": np.array(d["t_cr"])})


@dataclasses.dataclass
class RangeImage:
    data: np.ndarray  # [n_phi, n_theta] float32, INVALID where no return
    calib: Calibration

    def valid(self):
        return self.data > 0

    def copy(self):
        return RangeImage(self.data.copy(), self.calib)


@dataclasses.dataclass
class CorrespondenceMap:
    """Per range-latent cell: continuous image-latent coordinates and depth.

    u/v are pixel coordinates divided by the latent scale; d is camera-frame
    depth; valid is False where the cell had no range or projected outside
    the image.
    """
    u: np.ndarray
    v: np.ndarray
    d: np.ndarray
    valid: np.ndarray
    scale: int


# -- spherical <-> cartesian ---------------------------------------------------

def spherical_to_cartesian(r, phi, theta):
    """(r, phi, theta) -> [..., 3]. r must be positive."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise DomainError("range must be positive")
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    cp = np.cos(phi)
    return np.stack([r * cp * np.sin(theta), r * cp * np.cos(theta), r * np.sin(phi)], axis=-1)


def cartesian_to_spherical(points):
    """[..., 3] -> (r, phi, theta). Zero-norm points are out of domain."""
    p = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(p, axis=-1)
    if np.any(r == 0):
        raise DomainError("cannot convert zero-norm point to spherical")
    theta = np.arctan2(p[..., 0], p[..., 1])
    phi = np.arcsin(np.clip(p[..., 2] / r, -1.0, 1.0))
    return r, phi, theta


# -- pinhole projection --------------------------------------------------------

def project_to_image(points, calib):
    """LiDAR-frame points [N,3] -> (uv [N,2], depth [N], valid [N]).

    valid is False for points behind the camera (depth <= 0); uv for those
    rows is set to 0 and must not be consumed.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = p @ calib.r_cr.T + calib.t_cr
    d = pc[:, 2]
    valid = d > 0
    uv = np.zeros((p.shape[0], 2))
    dd = np.where(valid, d, 1.0)
    uv[:, 0] = calib.fx * pc[:, 0] / dd + calib.cx
    uv[:, 1] = calib.fy * pc[:, 1] / dd + calib.cy
    uv[~valid] = 0.0
    return uv, d, valid


def unproject_depth(depth, calib):
    """Camera depth grid [H,W] (INVALID where absent) -> LiDAR-frame points.

    Returns (points [M,3], rows [M], cols [M]) for the valid pixels, using
    integer pixel centres.
    """
    dm = np.asarray(depth, dtype=np.float64)
    ii, jj = np.nonzero(dm > 0)
    d = dm[ii, jj]
    x = (jj - calib.cx) / calib.fx * d
    y = (ii - calib.cy) / calib.fy * d
    pc = np.stack([x, y, d], axis=-1)
    p = (pc - calib.t_cr) @ calib.r_cr
    return p, ii, jj


# -- range image codec ---------------------------------------------------------

def encode_range(points, calib):
    """Bin LiDAR-frame points into a range image; nearest return wins.

    Out-of-FOV points (outside the angular window or beyond max_range) are
    dropped. Non-finite coordinates raise DomainError.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"points must be [N,3], got {p.shape}")
    if not np.isfinite(p).all():
        raise DomainError("non-finite point coordinates")
    grid = np.full((calib.n_phi, calib.n_theta), INVALID, dtype=np.float32)
    if p.shape[0]:
        r, phi, theta = cartesian_to_spherical(p)
        ti = np.floor((theta - calib.theta_min) / calib.theta_step).astype(np.int64)
        pi = np.floor((phi - calib.phi_min) / calib.phi_step).astype(np.int64)
        # the closed upper angular edge folds into the last bin
        ti[(theta == calib.theta_max)] = calib.n_theta - 1
        pi[(phi == calib.phi_max)] = calib.n_phi - 1
        ok = ((ti >= 0) & (ti < calib.n_theta) & (pi >= 0) & (pi < calib.n_phi)
              & (r > 0) & (r <= calib.max_range))
        big = np.full(grid.shape, np.inf, dtype=np.float64)
        np.minimum.at(big, (pi[ok], ti[ok]), r[ok])
        hit = np.isfinite(big)
        grid[hit] = big[hit].astype(np.float32)
    return RangeImage(grid, calib)


def decode_range(ri):
    """Valid cells -> points at bin-centre directions. Returns [M,3] float64."""
    calib = ri.calib
    phi_c, theta_c = calib.bin_centers()
    pi, ti = np.nonzero(ri.valid())
    r = ri.data[pi, ti].astype(np.float64)
    if r.size == 0:
        return np.zeros((0, 3))
    return spherical_to_cartesian(r, phi_c[pi], theta_c[ti])


def downsample_range(ri, scale):
    """Block-min over valid cells; a block with no valid cell stays invalid."""
    calib = ri.calib
    s = int(scale)
    if calib.n_phi % s or calib.n_theta % s:
        raise DimensionError(
            f"latent scale {s} must divide grid {calib.n_phi}x{calib.n_theta}")
    h, w = calib.n_phi // s, calib.n_theta // s
    d = ri.data.reshape(h, s, w, s)
    masked = np.where(d > 0, d, np.inf)
    out = masked.min(axis=(1, 3))
    return np.where(np.isfinite(out), out, INVALID).astype(np.float32)


# -- correspondence maps -------------------------------------------------------

def build_correspondence(ri, calib, latent_scale):
    """Range cells (at latent resolution) -> continuous image-latent coords.

    Each coarse cell takes the nearest valid range in its block and the
    block-centre direction, goes through decode + project, and lands at
    pixel coordinates divided by `latent_scale`. Cells without range or
    projecting outside the image are invalid.
    """
    s = int(latent_scale)
    if calib.img_h % s or calib.img_w % s:
        raise DimensionError(f"latent scale {s} must divide image {calib.img_h}x{calib.img_w}")
    coarse = downsample_range(ri, s)
    h, w = coarse.shape
    theta_step = (calib.theta_max - calib.theta_min) / w
    phi_step = (calib.phi_max - calib.phi_min) / h
    theta_c = calib.theta_min + (np.arange(w) + 0.5) * theta_step
    phi_c = calib.phi_min + (np.arange(h) + 0.5) * phi_step
    u = np.zeros((h, w), dtype=np.float32)
    v = np.zeros((h, w), dtype=np.float32)
    d = np.zeros((h, w), dtype=np.float32)
    valid = coarse > 0
    pi, ti = np.nonzero(valid)
    if pi.size:
        pts = spherical_to_cartesian(coarse[pi, ti].astype(np.float64), phi_c[pi], theta_c[ti])
        uv, depth, ok = project_to_image(pts, calib)
        inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] <= calib.img_w - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= calib.img_h - 1)
        u[pi, ti] = (uv[:, 0] / s).astype(np.float32)
        v[pi, ti] = (uv[:, 1] / s).astype(np.float32)
        d[pi, ti] = depth.astype(np.float32)
        valid[pi, ti] = inside
        u[~valid] = 0.0
        v[~valid] = 0.0
        d[~valid] = 0.0
    return CorrespondenceMap(u, v, d, valid, s)


def invert_correspondence(cmap, img_lat_hw):
    """Derive image-latent -> range-latent references by z-buffered scatter.

    Each valid forward entry claims the image-latent pixel it lands in; the
    smallest depth wins a contested pixel. Returns (ref [H,W,2] float32 with
    (x=theta_col, y=phi_row) index coordinates into the range-latent grid,
    depth [H,W] float32 of the winning entry (0 where unclaimed), valid
    [H,W] bool). Unclaimed pixels are invalid (no cross-modality update
    there).
    """
    hl, wl = img_lat_hw
    ref = np.zeros((hl, wl, 2), dtype=np.float32)
    zbuf = np.full((hl, wl), np.inf, dtype=np.float64)
    pi, ti = np.nonzero(cmap.valid)
    for i, j in zip(pi, ti):
        px = int(np.floor(cmap.u[i, j]))
        py = int(np.floor(cmap.v[i, j]))
        if not (0 <= px < wl and 0 <= py < hl):
            continue
        if cmap.d[i, j] < zbuf[py, px]:
            zbuf[py, px] = cmap.d[i, j]
            ref[py, px, 0] = j
            ref[py, px, 1] = i
    valid = np.isfinite(zbuf)
    depth = np.where(valid, zbuf, 0.0).astype(np.float32)
    return ref, depth, valid


# -- depth paste ---------------------------------------------------------------

def median_filter_masked(values, valid, region, k=3):
    """k x k median over the valid cells inside `region`, applied at region
    cells only. A cell whose window holds no valid in-region value stays (or
    becomes) invalid. Cells outside region are returned untouched."""
    if k % 2 == 0:
        raise DimensionError(f"median window must be odd, got {k}")
    h, w = values.shape
    out = values.copy()
    half = k // 2
    ri, ci = np.nonzero(region)
    usable = valid & region
    for i, j in zip(ri, ci):
        y0, y1 = max(0, i - half), min(h, i + half + 1)
        x0, x1 = max(0, j - half), min(w, j + half + 1)
        win_vals = values[y0:y1, x0:x1][usable[y0:y1, x0:x1]]
        out[i, j] = np.median(win_vals) if win_vals.size else INVALID
    return out


def _refine_cell_range(t0, direction, depth, calib):
    """Fixed-point refinement: re-project the bin-centre ray onto the depth
    prior and re-solve the ray distance. Returns the refined range or t0 if
    the local depth neighbourhood is not cleanly sampleable."""
    ru = calib.r_cr @ direction
    a = ru[2]
    b = calib.t_cr[2]
    if a <= 1e-9:
        return t0
    h, w = depth.shape
    t = t0
    for _ in range(4):
        pc = t * ru + calib.t_cr
        if pc[2] <= 0:
            return t0
        u = calib.fx * pc[0] / pc[2] + calib.cx
        v = calib.fy * pc[1] / pc[2] + calib.cy
        x0, y0 = int(np.floor(u)), int(np.floor(v))
        if not (0 <= x0 < w - 1 and 0 <= y0 < h - 1):
            return t0
        corners = depth[y0:y0 + 2, x0:x0 + 2]
        if np.any(corners <= 0):
            return t0
        fx_, fy_ = u - x0, v - y0
        dsamp = (corners[0, 0] * (1 - fx_) * (1 - fy_) + corners[0, 1] * fx_ * (1 - fy_)
                 + corners[1, 0] * (1 - fx_) * fy_ + corners[1, 1] * fx_ * fy_)
        t_new = (dsamp - b) / a
        if t_new <= 0:
            return t0
        if abs(t_new - t) < 1e-12:
            return t_new
        t = t_new
    return t


def paste_depth(ri, depth_prior, mask_r, calib, median_k=3):
    """Write the camera-depth prior into the masked range cells.

    Valid prior pixels are unprojected to LiDAR-frame points and binned into
    the masked cells (nearest wins); each hit cell is then refined by ray
    reprojection against the prior, and finally median-filtered over the
    valid in-mask cells. Cells outside the mask are bit-identical to the
    input. Masked cells never covered by the prior stay invalid.
    """
    if ri.data.shape != mask_r.shape:
        raise DimensionError(f"mask shape {mask_r.shape} vs range {ri.data.shape}")
    out = ri.data.copy()
    mask = mask_r.astype(bool)
    out[mask] = INVALID
    pts, _, _ = unproject_depth(depth_prior, calib)
    if pts.shape[0]:
        binned = encode_range(pts, calib)
        take = mask & binned.valid()
        out[take] = binned.data[take]
        # polish each seeded cell with the exact per-ray inversion
        phi_c, theta_c = calib.bin_centers()
        dp = np.asarray(depth_prior, dtype=np.float64)
        for i, j in zip(*np.nonzero(take)):
            direction = spherical_to_cartesian(1.0, phi_c[i], theta_c[j])
            t = _refine_cell_range(float(out[i, j]), direction, dp, calib)
            if 0 < t <= calib.max_range:
                out[i, j] = t
    filtered = median_filter_masked(out, out > 0, mask, median_k)
    return RangeImage(filtered.astype(np.float32), calib)
