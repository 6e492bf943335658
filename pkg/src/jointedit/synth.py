"""Synthetic paired camera + LiDAR scenes.

Scenes are built from a handful of analytic primitives (boxes, capped
cylinders, a ground plane) and rendered twice: once through the pinhole
camera and once over the spherical range grid. Everything is deterministic
given a SceneSpec, so ground truth for any edited pose can be re-rendered
on demand.

Frames: LiDAR frame is the world frame here (+y forward, +z up). The ground
plane sits at z = GROUND_Z. Object poses give the base center; z is the
height of the base above the ground.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import INVALID, Calibration

GROUND_Z = -1.2
LIGHT = np.array([0.25, -0.35, 0.90])
LIGHT = LIGHT / np.linalg.norm(LIGHT)

PROTOTYPES = ("crate", "truck", "tank")


@dataclass
class Pose:
    x: float
    y: float
    z: float  # base height above the ground plane
    yaw: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Distractor:
    x: float
    y: float
    yaw: float
    half: tuple
    seed: int
    gray: float


@dataclass
class SceneSpec:
    proto: str
    pose: Pose
    obj_seed: int
    tint: tuple
    ground_seed: int
    distractors: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["pose"] = self.pose.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pose"] = Pose.from_dict(d["pose"])
        d["tint"] = tuple(d["tint"])
        d["distractors"] = [Distractor(x=e["x"], y=e["y"], yaw=e["yaw"],
                                       half=tuple(e["half"]), seed=e["seed"],
                                       gray=e["gray"])
                            for e in d["distractors"]]
        return cls(**d)


@dataclass
class Primitive:
    kind: str          # "box" | "cyl" | "plane"
    center: np.ndarray
    yaw: float
    albedo: np.ndarray
    seed: int
    freq: float
    half: np.ndarray = None        # box half extents
    radius: float = 0.0            # cylinder
    half_h: float = 0.0


def _rotz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- value noise ------------------------------------------------------------

def _hash_lattice(ix, iy, iz, seed):
    x = (ix.astype(np.int64) & 0xFFFFFFFF).astype(np.uint32)
    y = (iy.astype(np.int64) & 0xFFFFFFFF).astype(np.uint32)
    z = (iz.astype(np.int64) & 0xFFFFFFFF).astype(np.uint32)
    with np.errstate(over="ignore"):
        h = (x * np.uint32(0x9E3779B1)) ^ (y * np.uint32(0x85EBCA77)) \
            ^ (z * np.uint32(0xC2B2AE3D)) ^ np.uint32((seed * 0x27D4EB2F) & 0xFFFFFFFF)
        h ^= h >> np.uint32(15)
        h *= np.uint32(0x2C1B3C6D)
        h ^= h >> np.uint32(12)
        h *= np.uint32(0x297A2D39)
        h ^= h >> np.uint32(15)
    return h.astype(np.float64) / 4294967296.0


def value_noise(p, seed):
    """Smooth [0,1] noise at points p [N,3], deterministic in (p, seed)."""
    q = np.asarray(p, dtype=np.float64)
    i = np.floor(q).astype(np.int64)
    f = q - i
    w = f * f * (3.0 - 2.0 * f)
    out = np.zeros(q.shape[0])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                h = _hash_lattice(i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz, seed)
                wx = w[:, 0] if dx else 1.0 - w[:, 0]
                wy = w[:, 1] if dy else 1.0 - w[:, 1]
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                out += h * wx * wy * wz
    return out


# -- prototypes -------------------------------------------------------------

def object_primitives(proto, pose, seed, tint):
    """Primitive list for one object prototype at a world pose."""
    if proto not in PROTOTYPES:
        raise ConfigError(f"unknown prototype {proto!r}, expected one of {PROTOTYPES}")
    base_z = GROUND_Z + pose.z
    R = _rotz(pose.yaw)
    t3 = np.asarray(tint, dtype=np.float64)

    def place(local_center, **kw):
        c = np.array([pose.x, pose.y, base_z]) + R @ np.asarray(local_center, dtype=np.float64)
        return Primitive(center=c, yaw=pose.yaw, seed=seed, **kw)

    if proto == "crate":
        col = np.array([0.72, 0.45, 0.20]) * t3
        return [place([0, 0, 0.55], kind="box", half=np.array([0.80, 0.60, 0.55]),
                      albedo=col, freq=2.4)]
    if proto == "truck":
        cargo = np.array([0.30, 0.42, 0.62]) * t3
        cab = cargo * 0.55
        return [
            place([0, -0.25, 0.65], kind="box", half=np.array([0.50, 0.85, 0.65]),
                  albedo=cargo, freq=1.8),
            place([0, 0.95, 0.35], kind="box", half=np.array([0.45, 0.35, 0.35]),
                  albedo=cab, freq=1.8),
        ]
    # tank: cylinder on a low bed
    bed = np.array([0.55, 0.57, 0.52]) * t3
    return [
        place([0, 0, 0.25], kind="box", half=np.array([0.90, 0.55, 0.25]),
              albedo=bed, freq=2.0),
        place([0, 0, 0.95], kind="cyl", radius=0.45, half_h=0.45,
              albedo=bed * 1.12, freq=3.0),
    ]


def footprint_radius(proto):
    return {"crate": 1.00, "truck": 1.45, "tank": 1.06}[proto]


def scene_primitives(spec, include_object=True):
    prims = [Primitive(kind="plane", center=np.array([0.0, 0.0, GROUND_Z]), yaw=0.0,
                       albedo=np.array([0.32, 0.34, 0.30]), seed=spec.ground_seed,
                       freq=0.7)]
    for d in spec.distractors:
        prims.append(Primitive(
            kind="box",
            center=np.array([d.x, d.y, GROUND_Z + d.half[2]]),
            yaw=d.yaw, half=np.asarray(d.half, dtype=np.float64),
            albedo=np.full(3, d.gray), seed=d.seed, freq=1.5))
    if include_object:
        prims.extend(object_primitives(spec.proto, spec.pose, spec.obj_seed, spec.tint))
    return prims


# -- ray intersection -------------------------------------------------------

_EPS = 1e-9


def _ray_box(o, d, prim):
    R = _rotz(-prim.yaw)
    ol = (o - prim.center) @ R.T
    dl = d @ R.T
    safe = np.where(np.abs(dl) < 1e-12, 1e-12, dl)
    inv = 1.0 / safe
    t1 = (-prim.half - ol) * inv
    t2 = (prim.half - ol) * inv
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    tmin = tn.max(axis=1)
    tmax = tf.min(axis=1)
    hit = (tmax >= tmin) & (tmin > _EPS)
    t = np.where(hit, tmin, np.inf)
    axis = tn.argmax(axis=1)
    nl = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    nl[rows, axis] = -np.sign(dl[rows, axis])
    n = nl @ R
    return t, n


def _ray_cyl(o, d, prim):
    ol = o - prim.center
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (ol[:, 0] * d[:, 0] + ol[:, 1] * d[:, 1])
    c = ol[:, 0] ** 2 + ol[:, 1] ** 2 - prim.radius ** 2
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    a_safe = np.where(np.abs(a) < 1e-14, 1e-14, a)
    t_side = np.where(ok, (-b - sq) / (2 * a_safe), np.inf)
    t_fin = np.where(np.isfinite(t_side), t_side, 0.0)
    z_at = ol[:, 2] + t_fin * d[:, 2]
    side_ok = ok & (t_side > _EPS) & (np.abs(z_at) <= prim.half_h)
    t_best = np.where(side_ok, t_side, np.inf)
    n_best = np.zeros_like(o)
    hp = ol + t_fin[:, None] * d
    n_best[:, 0] = np.where(side_ok, hp[:, 0] / prim.radius, 0.0)
    n_best[:, 1] = np.where(side_ok, hp[:, 1] / prim.radius, 0.0)
    dz = np.where(np.abs(d[:, 2]) < 1e-12, 1e-12, d[:, 2])
    for sgn in (1.0, -1.0):
        t_cap = (sgn * prim.half_h - ol[:, 2]) / dz
        px = ol[:, 0] + t_cap * d[:, 0]
        py = ol[:, 1] + t_cap * d[:, 1]
        cap_ok = (t_cap > _EPS) & (px ** 2 + py ** 2 <= prim.radius ** 2) & (t_cap < t_best)
        t_best = np.where(cap_ok, t_cap, t_best)
        n_best[cap_ok] = np.array([0.0, 0.0, sgn])
    return t_best, n_best


def _ray_plane(o, d, prim):
    dz = np.where(np.abs(d[:, 2]) < 1e-12, 1e-12, d[:, 2])
    t = (prim.center[2] - o[:, 2]) / dz
    hit = t > _EPS
    t = np.where(hit, t, np.inf)
    n = np.zeros_like(o)
    n[:, 2] = 1.0
    return t, n


_INTERSECT = {"box": _ray_box, "cyl": _ray_cyl, "plane": _ray_plane}


def cast_rays(o, d, prims):
    """Nearest hit of each ray. Returns (t, normal, prim_index); misses get
    t=inf and index -1."""
    n_rays = d.shape[0]
    if o.ndim == 1:
        o = np.broadcast_to(o, d.shape)
    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_i = np.full(n_rays, -1, dtype=np.int64)
    for idx, prim in enumerate(prims):
        t, n = _INTERSECT[prim.kind](o, d, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_i[closer] = idx
    return best_t, best_n, best_i


# -- shading ----------------------------------------------------------------

def _shadow_factor(points_xy, spec):
    """Analytic ground-shadow darkening under the main object."""
    hc = spec.pose.z + footprint_radius(spec.proto) * 0.55
    center = np.array([spec.pose.x, spec.pose.y]) - LIGHT[:2] / LIGHT[2] * hc
    az = LIGHT[:2]
    nrm = np.linalg.norm(az)
    e1 = az / nrm if nrm > 1e-9 else np.array([1.0, 0.0])
    e2 = np.array([-e1[1], e1[0]])
    rad = footprint_radius(spec.proto)
    dxy = points_xy - center
    q1 = dxy @ e1 / (rad * 1.25)
    q2 = dxy @ e2 / (rad * 0.95)
    q = np.sqrt(q1 ** 2 + q2 ** 2)
    fade = np.clip((1.0 - q) / 0.25, 0.0, 1.0)
    return 1.0 - 0.55 * fade


def _shade(points, normals, prim_idx, prims, shadow):
    n_pts = points.shape[0]
    rgb = np.zeros((n_pts, 3))
    for idx, prim in enumerate(prims):
        sel = prim_idx == idx
        if not sel.any():
            continue
        p = points[sel]
        local = (p - prim.center) @ _rotz(-prim.yaw).T
        tex = 0.70 + 0.60 * value_noise(local * prim.freq, prim.seed)
        alb = prim.albedo[None, :] * tex[:, None]
        lam = 0.35 + 0.65 * np.clip(normals[sel] @ LIGHT, 0.0, None)
        col = alb * lam[:, None]
        if shadow is not None and prim.kind == "plane":
            col = col * _shadow_factor(p[:, :2], shadow)[:, None]
        rgb[sel] = col
    return np.clip(rgb, 0.0, 1.0)


def _sky(dirs):
    z = np.clip(dirs[:, 2] / np.maximum(np.linalg.norm(dirs, axis=1), 1e-12), 0.0, 1.0)
    horizon = np.array([0.74, 0.80, 0.88])
    zenith = np.array([0.36, 0.50, 0.74])
    return horizon[None, :] * (1 - z[:, None]) + zenith[None, :] * z[:, None]


# -- renderers --------------------------------------------------------------

def camera_rays(calib: Calibration):
    """Unnormalized world rays through each pixel center; t equals camera depth."""
    jj, ii = np.meshgrid(np.arange(calib.img_w), np.arange(calib.img_h))
    dc = np.stack([(jj - calib.cx) / calib.fx,
                   (ii - calib.cy) / calib.fy,
                   np.ones_like(jj, dtype=np.float64)], axis=-1).reshape(-1, 3)
    origin = -calib.r_cr.T @ calib.t_cr
    dirs = dc @ calib.r_cr
    return origin, dirs


def render_camera(prims, calib, shadow=None, background="sky"):
    """Render [H,W,3] rgb, [H,W] camera depth, [H,W] hit mask.

    background: "sky" paints missed rays with the sky gradient, "none"
    leaves them black (used for object-only priors).
    """
    origin, dirs = camera_rays(calib)
    t, n, pid = cast_rays(origin, dirs, prims)
    hit = np.isfinite(t)
    pts = origin[None, :] + np.where(hit, t, 0.0)[:, None] * dirs
    rgb = np.zeros((dirs.shape[0], 3))
    if hit.any():
        rgb[hit] = _shade(pts[hit], n[hit], pid[hit], prims, shadow)
    if background == "sky":
        rgb[~hit] = _sky(dirs[~hit])
    depth = np.where(hit, t, INVALID)
    h, w = calib.img_h, calib.img_w
    return (rgb.reshape(h, w, 3).astype(np.float32),
            depth.reshape(h, w).astype(np.float32),
            hit.reshape(h, w))


def render_lidar(prims, calib):
    """Render the spherical range grid [n_phi, n_theta]; misses are INVALID."""
    phi_c, theta_c = calib.bin_centers()
    th, ph = np.meshgrid(theta_c, phi_c)
    dirs = np.stack([np.cos(ph) * np.sin(th),
                     np.cos(ph) * np.cos(th),
                     np.sin(ph)], axis=-1).reshape(-1, 3)
    t, _, _ = cast_rays(np.zeros(3), dirs, prims)
    r = np.where(np.isfinite(t) & (t <= calib.max_range), t, INVALID)
    return r.reshape(calib.n_phi, calib.n_theta).astype(np.float32)


# -- scene sampling ---------------------------------------------------------

def sample_scene(rng, max_distractors=3):
    """Draw a random SceneSpec."""
    proto = PROTOTYPES[int(rng.integers(len(PROTOTYPES)))]
    y = float(rng.uniform(5.0, 11.0))
    x = float(rng.uniform(-0.28, 0.28) * y)
    yaw = float(rng.uniform(-math.pi, math.pi))
    pose = Pose(x=x, y=y, z=0.0, yaw=yaw)
    tint = tuple(float(v) for v in rng.uniform(0.85, 1.15, 3))
    spec = SceneSpec(proto=proto, pose=pose,
                     obj_seed=int(rng.integers(2 ** 31)),
                     tint=tint,
                     ground_seed=int(rng.integers(2 ** 31)))
    n_d = int(rng.integers(0, max_distractors + 1))
    guard = 0
    while len(spec.distractors) < n_d and guard < 50:
        guard += 1
        dy = float(rng.uniform(4.0, 13.0))
        dx = float(rng.uniform(-0.45, 0.45) * dy)
        half = (float(rng.uniform(0.25, 0.6)), float(rng.uniform(0.25, 0.6)),
                float(rng.uniform(0.25, 0.6)))
        if math.hypot(dx - pose.x, dy - pose.y) < footprint_radius(proto) + max(half) + 0.5:
            continue
        spec.distractors.append(Distractor(
            x=dx, y=dy, yaw=float(rng.uniform(-math.pi, math.pi)),
            half=half, seed=int(rng.integers(2 ** 31)),
            gray=float(rng.uniform(0.35, 0.7))))
    return spec


def render_sample(spec, calib):
    """All per-sample tensors used for training and evaluation."""
    full = scene_primitives(spec, include_object=True)
    bg = scene_primitives(spec, include_object=False)
    obj_only = object_primitives(spec.proto, spec.pose, spec.obj_seed, spec.tint)

    image_sh, depth_obj, _ = render_camera(full, calib, shadow=spec)
    image_nosh, _, _ = render_camera(full, calib)
    image_bg, depth_bg, _ = render_camera(bg, calib)
    prior_rgb, prior_depth, sil = render_camera(obj_only, calib, background="none")
    range_obj = render_lidar(full, calib)
    range_bg = render_lidar(bg, calib)
    return {
        "image_sh": image_sh,
        "image_nosh": image_nosh,
        "image_bg": image_bg,
        "depth_obj": depth_obj,
        "depth_bg": depth_bg,
        "prior_rgb": prior_rgb,
        "prior_depth": np.where(sil, prior_depth, INVALID).astype(np.float32),
        "prior_sil": sil.astype(np.float32),
        "range_obj": range_obj,
        "range_bg": range_bg,
    }


def raycast_range(spec, calib, include_object=True):
    """Ground-truth range grid for a (possibly edited) scene."""
    return render_lidar(scene_primitives(spec, include_object), calib)


def raycast_depth(spec, calib, include_object=True):
    """Ground-truth camera depth for a (possibly edited) scene."""
    prims = scene_primitives(spec, include_object)
    _, depth, _ = render_camera(prims, calib)
    return depth
