"""Five-stage training schedule over a synthetic corpus.

Stage 1 trains both VAEs (the range VAE with an adversarial head after
warm-up), stage 2 the range denoiser, stage 3 the image denoiser, stage 4
fine-tunes the image denoiser with the refinement objective only on
shadow-free targets, and stage 5 trains both denoisers plus the
cross-modality exchange end to end. Later stages refuse to start without
their prerequisites' checkpoints.

Conditioning inputs (pasted composites, latents, semantic embeddings,
correspondence maps) are precomputed once per stage from a dedicated
augmentation stream, so the inner loop touches the frozen VAEs only where
gradients are needed (the refinement decode path).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import diffusion
from ..autodiff import Tensor
from ..conditions import (compose_image, compose_range, condition_maps,
                          image_mask_from_silhouette, range_mask_from_depth,
                          semantic_crop)
from ..config import RunConfig, config_sha256
from ..errors import (ConfigError, NumericError, SequencingError, UsageError)
from ..geometry import RangeImage
from ..networks import (CrossModalityExchange, ExchangeMaps, FeatureExtractor,
                        ImageVAE, JointDenoiser, PatchDiscriminator, RangeVAE,
                        SemanticEncoder, hinge_d_loss, hinge_g_loss)
from .augment import augment_image, augment_range
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam, clip_grad_norm

CSV_HEADER = "step,stage,loss_recon,loss_refine,loss_kl,loss_adv"

_PREREQS = {1: (), 2: (1,), 3: (1,), 4: (3,), 5: (2, 4)}
_TRAINABLE = {
    1: ("image_vae", "range_vae", "disc"),
    2: ("denoiser.range",),
    3: ("denoiser.image",),
    4: ("denoiser.image",),
    5: ("denoiser.image", "denoiser.range", "exchange"),
}
# module sets serialized into each stage's checkpoint: everything whose
# weights are meaningful (trained now or inherited trained) at that point
_SAVED = {
    1: ("image_vae", "range_vae", "disc"),
    2: ("image_vae", "range_vae", "disc", "denoiser.range"),
    3: ("image_vae", "range_vae", "disc", "denoiser.image"),
    4: ("image_vae", "range_vae", "disc", "denoiser.image"),
    5: ("image_vae", "range_vae", "disc", "denoiser.image", "denoiser.range",
        "exchange"),
}
_LOSS = {1: "vae", 2: "recon", 3: "recon+refine", 4: "refine", 5: "joint"}
_MODULE_KEYS = ("image_vae", "range_vae", "disc", "denoiser.image",
                "denoiser.range", "exchange")


@dataclasses.dataclass(frozen=True)
class StagePlan:
    stage: int
    prereqs: tuple
    trainable: tuple
    frozen: tuple
    data_variant: str
    loss: str
    epochs: int
    lr: float
    batch_size: int


def stage_plan(cfg: RunConfig, stage: int) -> StagePlan:
    if stage not in _PREREQS:
        raise UsageError(f"stage must be 1..5, got {stage}")
    sc = cfg.train.stage(stage)
    return StagePlan(
        stage=stage,
        prereqs=_PREREQS[stage],
        trainable=_TRAINABLE[stage],
        frozen=tuple(k for k in _MODULE_KEYS if k not in _TRAINABLE[stage]),
        data_variant="shadow-free" if stage == 4 else "shadowed",
        loss=_LOSS[stage],
        epochs=sc.epochs,
        lr=sc.lr,
        batch_size=sc.batch_size,
    )


def _to_chw(img):
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype=np.float32)


def normalize_range(r, max_range):
    """[H,W] metric ranges -> [1,H,W] in [0,1]; invalid cells become 0."""
    rn = np.where(r >= 0.0, r, 0.0) / max_range
    return np.clip(rn, 0.0, 1.0).astype(np.float32)[None]


def denormalize_range(rn, max_range, min_valid=0.5):
    """Inverse of normalize_range; cells below min_valid metres -> -1."""
    r = np.asarray(rn, dtype=np.float32) * max_range
    if r.ndim == 3:
        r = r[0]
    return np.where(r >= min_valid, r, -1.0).astype(np.float32)


def mask_to_latent(mask, factor=4):
    """Area-average a boolean mask over factor x factor blocks, then
    binarize at 0.5."""
    h, w = mask.shape
    m = mask.astype(np.float32).reshape(h // factor, factor,
                                        w // factor, factor).mean(axis=(1, 3))
    return (m >= 0.5).astype(np.float32)


class ModelBundle:
    """Every network in the pipeline plus the latent scale factors."""

    def __init__(self, cfg: RunConfig):
        m = cfg.model
        seeds = np.random.SeedSequence([cfg.train.seed, 0xB0]).spawn(4)
        self.image_vae = ImageVAE(np.random.default_rng(seeds[0]),
                                  width=m.vae_width, z_ch=m.latent_channels)
        self.range_vae = RangeVAE(np.random.default_rng(seeds[1]),
                                  width=m.vae_width, z_ch=m.latent_channels)
        self.disc = PatchDiscriminator(np.random.default_rng(seeds[2]))
        self.joint = JointDenoiser(np.random.default_rng(seeds[3]),
                                   z_ch=m.latent_channels,
                                   cond_ch=m.latent_channels + 1,
                                   width=m.denoiser_width,
                                   temb_dim=m.temb_dim,
                                   token_dim=m.semantic_dim,
                                   k_points=m.deform_points)
        self.semantic = SemanticEncoder(cfg.train.seed + 1000,
                                        dim=m.semantic_dim)
        self.features = FeatureExtractor(3, cfg.train.seed + 2000)
        self.scales = {"image": None, "range": None}

    def module(self, key):
        return {
            "image_vae": self.image_vae,
            "range_vae": self.range_vae,
            "disc": self.disc,
            "denoiser.image": self.joint.image,
            "denoiser.range": self.joint.range,
            "exchange": self.joint.exchange,
        }[key]

    def tensor_table(self, keys):
        out = {}
        for key in keys:
            for name, t in self.module(key).named_tensors().items():
                out[f"{key}.{name}"] = t.data
        for which, val in self.scales.items():
            if val is not None:
                out[f"scale.{which}"] = np.array([val], dtype=np.float64)
        return out

    def load_available(self, table):
        """Load every module fully present in the table, plus scales."""
        for key in _MODULE_KEYS:
            mod = self.module(key)
            names = [f"{key}.{n}" for n in mod.named_tensors()]
            if all(n in table for n in names):
                mod.load_tensors(table, prefix=key)
        for which in ("image", "range"):
            k = f"scale.{which}"
            if k in table:
                self.scales[which] = float(np.asarray(table[k]).ravel()[0])

    def encode_mu(self, vae, x_chw):
        """Deterministic latent (posterior mean), graph-free."""
        with ad.no_grad():
            mu, _ = vae.encode(Tensor(x_chw[None]))
        return mu.data[0].astype(np.float32)


class StageData:
    """Per-stage precomputed training arrays, keyed by sample id."""

    __slots__ = ("ids", "img_px", "z_img", "cond_img", "tok_img",
                 "z_rng", "cond_rng", "tok_rng", "maps")

    def __init__(self):
        self.ids = []
        self.img_px = {}
        self.z_img = {}
        self.cond_img = {}
        self.tok_img = {}
        self.z_rng = {}
        self.cond_rng = {}
        self.tok_rng = {}
        self.maps = {}


class StageRunner:
    def __init__(self, cfg: RunConfig, corpus, out_dir):
        self.cfg = cfg
        self.corpus = corpus
        self.calib = corpus.calib
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.bundle = ModelBundle(cfg)
        self.schedule = diffusion.NoiseSchedule(cfg.schedule.timesteps,
                                                cfg.schedule.beta_start,
                                                cfg.schedule.beta_end)

    # -- paths and plans -----------------------------------------------------
    def ckpt_path(self, stage):
        return self.out_dir / f"stage{stage}.ckpt"

    def csv_path(self, stage):
        return self.out_dir / f"stage{stage}_loss.csv"

    def plan(self, stage):
        return stage_plan(self.cfg, stage)

    def train_ids(self):
        return self.corpus.ids("train")

    def steps_per_epoch(self, plan):
        n = len(self.train_ids())
        if plan.stage == 1:
            n *= 2  # object scenes + background-only renders
        return -(-n // plan.batch_size)

    # -- conditioning precompute ----------------------------------------------
    def _embed(self, crop_chw):
        with ad.no_grad():
            emb = self.bundle.semantic(Tensor(crop_chw[None]))
        return emb.data[0].astype(np.float32)

    def _prepare(self, plan, aug_rng):
        """Build latents/conditions for the denoiser stages (2..5)."""
        need_img = plan.stage in (3, 4, 5)
        need_rng = plan.stage in (2, 5)
        data = StageData()
        data.ids = list(self.train_ids())
        calib = self.calib
        b = self.bundle
        img_key = "image_nosh" if plan.data_variant == "shadow-free" else "image_sh"

        z_img_all, z_rng_all = [], []
        for sid in data.ids:
            prior_rgb = self.corpus.load(sid, "prior_rgb")
            prior_depth = self.corpus.load(sid, "prior_depth")
            sil = self.corpus.load(sid, "prior_sil").astype(bool)
            if need_img:
                image = self.corpus.load(sid, img_key)
                image_bg = self.corpus.load(sid, "image_bg")
                rgb_aug = augment_image(prior_rgb, aug_rng)
                m_img = image_mask_from_silhouette(sil)
                comp = compose_image(rgb_aug, sil, m_img, image_bg)
                data.img_px[sid] = _to_chw(image)
                z = b.encode_mu(b.image_vae, _to_chw(image))
                zp = b.encode_mu(b.image_vae, _to_chw(comp))
                z_img_all.append(z)
                data.z_img[sid] = z
                data.cond_img[sid] = (zp, mask_to_latent(m_img)[None])
                data.tok_img[sid] = self._embed(_to_chw(semantic_crop(rgb_aug, sil)))
            if need_rng:
                range_obj = self.corpus.load(sid, "range_obj")
                range_bg = self.corpus.load(sid, "range_bg")
                depth_aug = augment_range(prior_depth, aug_rng)
                m_rng = range_mask_from_depth(prior_depth, calib)
                pasted = compose_range(RangeImage(range_bg, calib), depth_aug,
                                       m_rng, calib)
                z = b.encode_mu(b.range_vae, normalize_range(range_obj, calib.max_range))
                zp = b.encode_mu(b.range_vae, normalize_range(pasted.data, calib.max_range))
                z_rng_all.append(z)
                data.z_rng[sid] = z
                data.cond_rng[sid] = (zp, mask_to_latent(m_rng)[None])
                data.tok_rng[sid] = self._embed(_to_chw(semantic_crop(prior_rgb, sil)))
                if plan.stage == 5:
                    data.maps[sid] = condition_maps(pasted, calib, scale=8)

        # latent scale factors: unit global std, fixed when first measured
        if need_img and b.scales["image"] is None:
            b.scales["image"] = 1.0 / float(np.std(np.stack(z_img_all)))
        if need_rng and b.scales["range"] is None:
            b.scales["range"] = 1.0 / float(np.std(np.stack(z_rng_all)))
        for sid in data.ids:
            if need_img:
                s = b.scales["image"]
                zp, m = data.cond_img[sid]
                data.z_img[sid] = (data.z_img[sid] * s).astype(np.float32)
                data.cond_img[sid] = np.concatenate(
                    [(zp * s).astype(np.float32), m], axis=0)
            if need_rng:
                s = b.scales["range"]
                zp, m = data.cond_rng[sid]
                data.z_rng[sid] = (data.z_rng[sid] * s).astype(np.float32)
                data.cond_rng[sid] = np.concatenate(
                    [(zp * s).astype(np.float32), m], axis=0)
        return data

    def _load_stage1_data(self):
        """(id, variant) -> (image [3,H,W], range [1,h,w]) pairs."""
        items, images, ranges = [], {}, {}
        mr = self.calib.max_range
        for sid in self.train_ids():
            for variant in ("obj", "bg"):
                img = self.corpus.load(sid, "image_sh" if variant == "obj" else "image_bg")
                rng_img = self.corpus.load(sid, "range_obj" if variant == "obj" else "range_bg")
                key = (sid, variant)
                items.append(key)
                images[key] = _to_chw(img)
                ranges[key] = normalize_range(rng_img, mr)
        return items, images, ranges

    # -- checkpoint plumbing ---------------------------------------------------
    def _save(self, plan, step, train_rng, opts):
        tensors = self.bundle.tensor_table(_SAVED[plan.stage])
        for prefix, opt in opts.items():
            tensors.update(opt.state_tensors(prefix))
        save_checkpoint(self.ckpt_path(plan.stage), plan.stage, step,
                        self.schedule.to_dict(), config_sha256(self.cfg),
                        json.dumps(train_rng.bit_generator.state),
                        tensors)

    def load_prerequisites(self, plan):
        for p in plan.prereqs:
            path = self.ckpt_path(p)
            if not path.exists():
                raise SequencingError(
                    f"stage {plan.stage} requires the stage-{p} checkpoint "
                    f"({path}); run stage {p} first")
            ckpt = load_checkpoint(path)
            if ckpt["stage"] != p:
                raise SequencingError(
                    f"{path} holds a stage-{ckpt['stage']} checkpoint, expected {p}")
            self.bundle.load_available(ckpt["tensors"])

    def _optimizers(self, plan):
        """Main optimizer plus, in stage 1, the discriminator's own."""
        named = {}
        for key in plan.trainable:
            if plan.stage == 1 and key == "disc":
                continue
            for n, t in self.bundle.module(key).named_params().items():
                named[f"{key}.{n}"] = t
        opts = {"opt": Adam(named, plan.lr)}
        if plan.stage == 1:
            opts["optd"] = Adam(
                {f"disc.{n}": t for n, t in self.bundle.disc.named_params().items()},
                plan.lr)
        return opts

    # -- the training loop -----------------------------------------------------
    def run_stage(self, stage, resume=False, stop_after_epochs=None):
        plan = self.plan(stage)
        self.load_prerequisites(plan)
        seed = self.cfg.train.seed
        train_rng = np.random.default_rng(np.random.SeedSequence([seed, stage, 0]))
        aug_rng = np.random.default_rng(np.random.SeedSequence([seed, stage, 1]))
        opts = self._optimizers(plan)
        step = 0

        if resume:
            path = self.ckpt_path(stage)
            if not path.exists():
                raise SequencingError(f"cannot resume stage {stage}: no {path}")
            ckpt = load_checkpoint(path)
            if ckpt["stage"] != stage:
                raise UsageError(
                    f"{path} holds a stage-{ckpt['stage']} checkpoint, expected {stage}")
            self.bundle.load_available(ckpt["tensors"])
            for prefix, opt in opts.items():
                opt.load_state(ckpt["tensors"], prefix)
            train_rng.bit_generator.state = json.loads(ckpt["rng_state"])
            step = ckpt["step"]

        if plan.stage == 1:
            stage1_items, stage1_images, stage1_ranges = self._load_stage1_data()
            data = None
        else:
            data = self._prepare(plan, aug_rng)

        spe = self.steps_per_epoch(plan)
        epoch_start = step // spe
        epoch_stop = plan.epochs
        if stop_after_epochs is not None:
            epoch_stop = min(epoch_stop, epoch_start + stop_after_epochs)

        # frozen modules skip weight-gradient work entirely for the stage
        flipped = [t for key in plan.frozen
                   for t in self.bundle.module(key).params()]
        for t in flipped:
            t.requires_grad = False

        csv_file = open(self.csv_path(stage), "a" if resume else "w")
        try:
            if not resume:
                csv_file.write(CSV_HEADER + "\n")
            for _epoch in range(epoch_start, epoch_stop):
                if plan.stage == 1:
                    order = [stage1_items[i]
                             for i in train_rng.permutation(len(stage1_items))]
                else:
                    order = [data.ids[i]
                             for i in train_rng.permutation(len(data.ids))]
                for lo in range(0, len(order), plan.batch_size):
                    batch = order[lo:lo + plan.batch_size]
                    if plan.stage == 1:
                        parts = self._step_vae(batch, stage1_images,
                                               stage1_ranges, train_rng,
                                               opts, step, step + 1)
                    else:
                        parts = self._step_denoiser(plan, batch, data,
                                                    train_rng, opts, step + 1)
                    step += 1
                    csv_file.write(
                        f"{step},{plan.stage},{parts['recon']:.6g},"
                        f"{parts['refine']:.6g},{parts['kl']:.6g},"
                        f"{parts['adv']:.6g}\n")
                csv_file.flush()
                self._save(plan, step, train_rng, opts)
        finally:
            csv_file.close()
            for t in flipped:
                t.requires_grad = True
        return self.ckpt_path(stage)

    def _check_finite(self, stage, step, batch, parts):
        vals = np.array([parts[k] for k in ("recon", "refine", "kl", "adv")])
        if np.all(np.isfinite(vals)):
            return
        dump = {"stage": stage, "step": step,
                "batch": [list(b) if isinstance(b, tuple) else b for b in batch],
                "losses": {k: float(v) for k, v in parts.items()}}
        dump_path = self.out_dir / f"stage{stage}_nan_dump.json"
        with open(dump_path, "w") as f:
            json.dump(dump, f, indent=1)
        raise NumericError(
            f"stage {stage} step {step}: non-finite loss on batch "
            f"{batch} (diagnostics in {dump_path})")

    # -- per-stage step functions ----------------------------------------------
    def _step_vae(self, batch, images, ranges, rng, opts, step, step_no):
        b = self.bundle
        cfg = self.cfg.train
        x_img = Tensor(np.stack([images[k] for k in batch]))
        x_rng = Tensor(np.stack([ranges[k] for k in batch]))
        adv_on = step >= cfg.adv_warmup

        mu_i, lv_i = b.image_vae.encode(x_img)
        eps = Tensor(rng.standard_normal(mu_i.shape).astype(np.float32))
        rec_i = b.image_vae.decode(b.image_vae.reparameterize(mu_i, lv_i, eps))
        l1_i = ad.l1(rec_i, x_img)
        kl_i = b.image_vae.kl(mu_i, lv_i)

        mu_r, lv_r = b.range_vae.encode(x_rng)
        eps = Tensor(rng.standard_normal(mu_r.shape).astype(np.float32))
        rec_r = b.range_vae.decode(b.range_vae.reparameterize(mu_r, lv_r, eps))
        l1_r = ad.l1(rec_r, x_rng)
        kl_r = b.range_vae.kl(mu_r, lv_r)

        total = l1_i + l1_r + (kl_i + kl_r) * cfg.kl_weight
        adv_val = 0.0
        if adv_on:
            g_term = hinge_g_loss(b.disc(rec_r)) * cfg.adv_weight
            adv_val = g_term.item()
            total = total + g_term
        parts = {"recon": l1_i.item() + l1_r.item(), "refine": 0.0,
                 "kl": kl_i.item() + kl_r.item(), "adv": adv_val}
        self._check_finite(1, step_no, batch, parts)
        gen_opt = opts["opt"]
        gen_opt.zero_grad()
        b.disc.zero_grad()
        total.backward()
        clip_grad_norm(list(gen_opt.named_params.values()), cfg.grad_clip)
        gen_opt.step()

        if adv_on:
            d_opt = opts["optd"]
            d_opt.zero_grad()
            fake = Tensor(rec_r.data.copy())
            d_loss = hinge_d_loss(b.disc(x_rng), b.disc(fake))
            d_loss.backward()
            clip_grad_norm(list(d_opt.named_params.values()), cfg.grad_clip)
            d_opt.step()

        return parts

    def _step_denoiser(self, plan, batch, data, rng, opts, step_no):
        b = self.bundle
        cfg = self.cfg.train
        sched = self.schedule
        t = int(rng.integers(1, sched.timesteps + 1))
        parts = {"recon": 0.0, "refine": 0.0, "kl": 0.0, "adv": 0.0}

        zi_t = ci = tok_i = eps_i = None
        if plan.stage in (3, 4, 5):
            z0 = np.stack([data.z_img[s] for s in batch])
            eps_i = rng.standard_normal(z0.shape).astype(np.float32)
            zi_t = Tensor(diffusion.q_sample(z0, t, eps_i, sched))
            ci = Tensor(np.stack([data.cond_img[s] for s in batch]))
            tok_i = Tensor(np.stack([data.tok_img[s] for s in batch]))
        if plan.stage in (2, 5):
            z0 = np.stack([data.z_rng[s] for s in batch])
            eps_r = rng.standard_normal(z0.shape).astype(np.float32)
            zr_t = Tensor(diffusion.q_sample(z0, t, eps_r, sched))
            cr = Tensor(np.stack([data.cond_rng[s] for s in batch]))
            tok_r = Tensor(np.stack([data.tok_rng[s] for s in batch]))

        if plan.stage == 5:
            maps = ExchangeMaps.from_condition_maps(
                [data.maps[s] for s in batch], self.calib.max_range)
            eps_hat_i, eps_hat_r = b.joint(zi_t, ci, zr_t, cr,
                                           t, tok_i, tok_r, maps)
        elif plan.stage == 2:
            eps_hat_r = b.joint.range(zr_t, cr, t, tok_r)
        else:
            eps_hat_i = b.joint.image(zi_t, ci, t, tok_i)

        total = None
        if plan.stage in (2, 5):
            recon_r = diffusion.recon_loss(eps_hat_r, eps_r)
            parts["recon"] += recon_r.item()
            total = recon_r
        if plan.stage in (3, 4, 5):
            recon_i = diffusion.recon_loss(eps_hat_i, eps_i)
            parts["recon"] += recon_i.item()
            x0h = diffusion.predict_x0(zi_t, eps_hat_i, t, sched)
            c_hat = b.image_vae.decode(x0h * (1.0 / b.scales["image"]))
            target = Tensor(np.stack([data.img_px[s] for s in batch]))
            refine = diffusion.refine_loss(c_hat, target, b.features)
            parts["refine"] = refine.item()
            if plan.loss == "refine":
                branch = refine
            else:
                branch = diffusion.branch_loss(recon_i, refine, cfg.lambda_refine)
            total = branch if total is None else total + branch

        self._check_finite(plan.stage, step_no, batch, parts)
        opt = opts["opt"]
        opt.zero_grad()
        total.backward()
        clip_grad_norm(list(opt.named_params.values()), cfg.grad_clip)
        opt.step()
        return parts
