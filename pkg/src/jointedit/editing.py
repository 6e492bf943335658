"""Object-level scene editing via conditioned joint reverse diffusion.

An edit renders the requested prototype at the target pose, pastes it into
the camera image and range grid, encodes those composites into the
denoisers' conditioning channels, runs the joint reverse chain with the
cross-modality exchange, decodes both latents, and stitches the generated
content back into the untouched scene.

Sampling draws per-modality noise from two independent seeded streams, so
forcing the exchange gates to zero reproduces two single-branch samplings
bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffusion, synth
from .autodiff import Tensor
from .conditions import (compose_image, compose_range, condition_maps,
                         image_mask_from_silhouette, range_mask_from_depth,
                         semantic_crop)
from .config import RunConfig, config_sha256
from .errors import DimensionError, SequencingError, UsageError
from .geometry import INVALID, Calibration, RangeImage, decode_range
from .ioformats import sha256_file, write_f32, write_ply, write_ppm
from .networks import ExchangeMaps
from .training import (ModelBundle, denormalize_range, load_checkpoint,
                       mask_to_latent, normalize_range)

log = logging.getLogger("jointedit.editing")

MODES = ("mask-bounded", "unconstrained")


def _chw(img):
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype=np.float32)


@dataclasses.dataclass
class EditRequest:
    """One edit: insert `proto` at `pose` into an object-free scene."""

    scene_image: np.ndarray   # [H,W,3] float32 in [0,1]
    scene_range: np.ndarray   # [h,w] float32 metric ranges, -1 invalid
    calib: Calibration
    proto: str
    pose: synth.Pose
    mode: str = "mask-bounded"
    seed: int = 0
    steps: int | None = None  # reverse-step override; None runs the full chain
    obj_seed: int = 0
    tint: tuple = (1.0, 1.0, 1.0)


@dataclasses.dataclass
class EditConditions:
    """Everything the sampler consumes, kept for audit."""

    cond_img: np.ndarray      # [z+1, H/4, W/4] scaled pasted latent + mask
    cond_rng: np.ndarray      # [z+1, h/4, w/4]
    tok_img: np.ndarray       # [D] semantic embedding of the prior crop
    tok_rng: np.ndarray       # [D]
    maps: tuple               # (cmap, ref_img, depth_img, valid_img)
    mask_img: np.ndarray      # [H,W] bool edit region
    mask_rng: np.ndarray      # [h,w] bool
    comp_img: np.ndarray      # [H,W,3] pasted camera composite
    pasted_range: RangeImage
    prior_rgb: np.ndarray
    prior_depth: np.ndarray
    sil: np.ndarray


@dataclasses.dataclass
class EditResult:
    image: np.ndarray         # [H,W,3] float32
    range_image: np.ndarray   # [h,w] float32 metric, -1 invalid
    points: np.ndarray        # [M,3] float64 decoded from range_image
    conditions: EditConditions
    mask_img: np.ndarray
    mask_rng: np.ndarray
    audit: dict


def request_from_corpus(corpus, sid, proto=None, pose=None,
                        mode="mask-bounded", seed=0, steps=None):
    """Build a request against a stored sample's object-free backdrop.

    proto=None reuses the sample's own prototype and appearance, so the
    edit re-inserts the original object (optionally at a new pose).
    """
    spec = corpus.scene(sid)
    reuse = proto is None
    return EditRequest(
        scene_image=corpus.load(sid, "image_bg"),
        scene_range=corpus.load(sid, "range_bg"),
        calib=corpus.calib,
        proto=spec.proto if reuse else proto,
        pose=pose if pose is not None else spec.pose,
        mode=mode,
        seed=seed,
        steps=steps,
        obj_seed=spec.obj_seed if reuse else 0,
        tint=tuple(spec.tint) if reuse else (1.0, 1.0, 1.0),
    )


def stitch(decoded_image, decoded_range, scene_image, scene_range,
           mask_img, mask_rng, mode):
    """Merge generated content into the scene.

    mask-bounded copies generated pixels/cells only inside the edit masks,
    leaving everything outside bit-identical to the scene; unconstrained
    keeps the full decoded frames (the whole grid is the processed region
    here, which is what lets shadow effects land outside the mask).
    """
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    di = np.asarray(decoded_image, dtype=np.float32)
    dr = np.asarray(decoded_range, dtype=np.float32)
    si = np.asarray(scene_image, dtype=np.float32)
    sr = np.asarray(scene_range, dtype=np.float32)
    if di.shape != si.shape:
        raise DimensionError(f"decoded image {di.shape} vs scene {si.shape}")
    if dr.shape != sr.shape:
        raise DimensionError(f"decoded range {dr.shape} vs scene {sr.shape}")
    if mode == "mask-bounded":
        image = np.where(np.asarray(mask_img, dtype=bool)[..., None], di, si)
        rgrid = np.where(np.asarray(mask_rng, dtype=bool), dr, sr)
    else:
        image, rgrid = di.copy(), dr.copy()
    return image.astype(np.float32), rgrid.astype(np.float32)


class Editor:
    """Checkpoint-backed edit pipeline; read-only after construction.

    Checkpoints load in order, each overwriting the modules it fully
    contains, so e.g. [stage2, stage4] yields both trained single-branch
    denoisers with the exchange still at initialization (zero gates).
    A best checkpoint below stage 5 warns and proceeds with the gates as
    stored, which is exactly what ablation runs need.
    """

    def __init__(self, cfg: RunConfig, checkpoint_paths):
        if isinstance(checkpoint_paths, (str, Path)):
            checkpoint_paths = [checkpoint_paths]
        if not checkpoint_paths:
            raise UsageError("at least one checkpoint is required")
        self.cfg = cfg
        self.bundle = ModelBundle(cfg)
        self.checkpoints = []
        sched = None
        best = 0
        for path in checkpoint_paths:
            ckpt = load_checkpoint(path)
            self.bundle.load_available(ckpt["tensors"])
            self.checkpoints.append({
                "path": str(path),
                "stage": int(ckpt["stage"]),
                "sha256": sha256_file(path),
                "config_sha256": ckpt["config_hash"],
            })
            sched = ckpt["schedule"]
            best = max(best, int(ckpt["stage"]))
        self.stage = best
        if best < 5:
            log.warning("best checkpoint is stage %d (< 5): proceeding with "
                        "cross-modality gates as stored", best)
        missing = [k for k, v in self.bundle.scales.items() if v is None]
        if missing:
            raise SequencingError(
                f"checkpoints carry no latent scale for {missing}; they must "
                "include the stage that trained that branch")
        self.schedule = diffusion.NoiseSchedule(**sched)

    # -- condition assembly ----------------------------------------------------
    def prepare_conditions(self, req: EditRequest) -> EditConditions:
        if req.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {req.mode!r}")
        calib = req.calib
        prims = synth.object_primitives(req.proto, req.pose, req.obj_seed,
                                        tuple(req.tint))
        prior_rgb, depth, sil_b = synth.render_camera(prims, calib,
                                                      background="none")
        sil = sil_b.astype(np.float32)
        prior_depth = np.where(sil_b, depth, INVALID).astype(np.float32)
        mask_img = image_mask_from_silhouette(sil)
        mask_rng = range_mask_from_depth(prior_depth, calib)

        comp_img = compose_image(prior_rgb, sil, mask_img, req.scene_image)
        scene_ri = RangeImage(np.asarray(req.scene_range, dtype=np.float32),
                              calib)
        pasted = compose_range(scene_ri, prior_depth, mask_rng, calib)

        b = self.bundle
        zp_i = b.encode_mu(b.image_vae, _chw(comp_img)) * b.scales["image"]
        cond_img = np.concatenate(
            [zp_i.astype(np.float32), mask_to_latent(mask_img)[None]], axis=0)
        zp_r = b.encode_mu(b.range_vae,
                           normalize_range(pasted.data, calib.max_range))
        zp_r = zp_r * b.scales["range"]
        cond_rng = np.concatenate(
            [zp_r.astype(np.float32), mask_to_latent(mask_rng)[None]], axis=0)

        with ad.no_grad():
            tok = b.semantic(Tensor(_chw(semantic_crop(prior_rgb, sil))[None]))
        tok = tok.data[0].astype(np.float32)
        maps = condition_maps(pasted, calib, scale=8)
        return EditConditions(cond_img=cond_img, cond_rng=cond_rng,
                              tok_img=tok, tok_rng=tok.copy(), maps=maps,
                              mask_img=mask_img, mask_rng=mask_rng,
                              comp_img=comp_img, pasted_range=pasted,
                              prior_rgb=prior_rgb, prior_depth=prior_depth,
                              sil=sil)

    # -- sampling ----------------------------------------------------------------
    def joint_sample(self, conds: EditConditions, seed, steps=None,
                     force_zero_gates=False):
        """Run the conditioned reverse chain; returns (image, range) latents.

        Noise comes from one stream per modality, both derived from `seed`,
        each consumed in the order: initial draw, then one draw per step.
        """
        sched = self.schedule
        t_start = sched.timesteps if steps is None else int(steps)
        if not 1 <= t_start <= sched.timesteps:
            raise UsageError(
                f"step override must be in 1..{sched.timesteps}, got {steps}")
        calib = conds.pasted_range.calib
        zch = self.cfg.model.latent_channels
        rng_i = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
        rng_r = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        ci = Tensor(conds.cond_img[None])
        cr = Tensor(conds.cond_rng[None])
        tok_i = Tensor(conds.tok_img[None])
        tok_r = Tensor(conds.tok_rng[None])
        maps = ExchangeMaps.from_condition_maps([conds.maps], calib.max_range)
        zi = rng_i.standard_normal(
            (1, zch, calib.img_h // 4, calib.img_w // 4)).astype(np.float32)
        zr = rng_r.standard_normal(
            (1, zch, calib.n_phi // 4, calib.n_theta // 4)).astype(np.float32)
        log.info("joint reverse sampling: %d steps (schedule T=%d, seed=%d, "
                 "zero_gates=%s)", t_start, sched.timesteps, int(seed),
                 force_zero_gates)
        with ad.no_grad():
            for t in range(t_start, 0, -1):
                eps_i, eps_r = self.bundle.joint(
                    Tensor(zi), ci, Tensor(zr), cr, t, tok_i, tok_r, maps,
                    force_zero_gates=force_zero_gates)
                zi = diffusion.ddpm_step(
                    zi, eps_i.data, t, sched,
                    rng_i.standard_normal(zi.shape).astype(np.float32))
                zr = diffusion.ddpm_step(
                    zr, eps_r.data, t, sched,
                    rng_r.standard_normal(zr.shape).astype(np.float32))
        return zi[0], zr[0]

    def decode_latents(self, z_img, z_rng, calib):
        """Latents -> ([H,W,3] image in [0,1], [h,w] metric range grid)."""
        b = self.bundle
        with ad.no_grad():
            img = b.image_vae.decode(
                Tensor(z_img[None] * np.float32(1.0 / b.scales["image"])))
            rn = b.range_vae.decode(
                Tensor(z_rng[None] * np.float32(1.0 / b.scales["range"])))
        image = np.transpose(img.data[0], (1, 2, 0)).astype(np.float32)
        return np.clip(image, 0.0, 1.0), denormalize_range(rn.data[0],
                                                           calib.max_range)

    # -- the full pipeline -------------------------------------------------------
    def edit(self, req: EditRequest, force_zero_gates=False) -> EditResult:
        conds = self.prepare_conditions(req)
        z_img, z_rng = self.joint_sample(conds, req.seed, req.steps,
                                         force_zero_gates=force_zero_gates)
        dec_img, dec_rng = self.decode_latents(z_img, z_rng, req.calib)
        image, rgrid = stitch(dec_img, dec_rng, req.scene_image,
                              req.scene_range, conds.mask_img, conds.mask_rng,
                              req.mode)
        points = decode_range(RangeImage(rgrid, req.calib))
        audit = {
            "mode": req.mode,
            "proto": req.proto,
            "pose": req.pose.to_dict(),
            "obj_seed": int(req.obj_seed),
            "tint": [float(v) for v in req.tint],
            "seed": int(req.seed),
            "steps_run": int(req.steps if req.steps is not None
                             else self.schedule.timesteps),
            "timesteps": int(self.schedule.timesteps),
            "force_zero_gates": bool(force_zero_gates),
            "checkpoints": self.checkpoints,
            "config_sha256": config_sha256(self.cfg),
        }
        return EditResult(image=image, range_image=rgrid, points=points,
                          conditions=conds, mask_img=conds.mask_img,
                          mask_rng=conds.mask_rng, audit=audit)


def write_result(result: EditResult, out_dir):
    """Write tensors, previews, and audit.json; returns the audit path.

    Deterministic: same result -> byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conds = result.conditions
    tensors = {
        "image": result.image,
        "range": result.range_image,
        "cond_img": conds.cond_img,
        "cond_rng": conds.cond_rng,
        "mask_img": conds.mask_img.astype(np.float32),
        "mask_rng": conds.mask_rng.astype(np.float32),
        "comp_img": conds.comp_img,
        "pasted_range": conds.pasted_range.data,
    }
    files = {}
    for name, arr in sorted(tensors.items()):
        path = out / f"{name}.f32"
        write_f32(path, np.ascontiguousarray(arr, dtype=np.float32))
        files[name] = {"shape": [int(s) for s in arr.shape],
                       "sha256": sha256_file(path)}
    write_ppm(out / "image.ppm", result.image)
    write_ply(out / "points.ply", result.points)
    files["image.ppm"] = {"sha256": sha256_file(out / "image.ppm")}
    files["points.ply"] = {"sha256": sha256_file(out / "points.ply")}
    audit = dict(result.audit)
    audit["files"] = files
    audit_path = out / "audit.json"
    with open(audit_path, "w") as f:
        json.dump(audit, f, indent=1, sort_keys=True)
        f.write("\n")
    return audit_path
