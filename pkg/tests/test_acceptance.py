"""Release gate: eight pipeline-level checks, one pass/fail line each.

Each test prints a single summary line (bypassing capture) so a full run
reads as a checklist. The overfit fixture trains all five stages on a
64-sample corpus at the shipped configuration; expect roughly half an hour
of wall time for the whole gate on a laptop-class CPU.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from jointedit import autodiff as ad
from jointedit import diffusion, editing, gradcheck, metrics
from jointedit import geometry as geo
from jointedit.autodiff import Tensor
from jointedit.config import default_calibration, load_config
from jointedit.corpus import Corpus, build_corpus
from jointedit.errors import DomainError
from jointedit.ioformats import read_f32, sha256_file, write_f32
from jointedit.networks.conditioning import (CrossModalityExchange,
                                             DeformableCrossAttention,
                                             ExchangeMaps)
from jointedit.networks.denoiser import Denoiser, JointDenoiser
from jointedit.training import StageRunner
from jointedit.training.checkpoint import load_checkpoint, save_checkpoint
from jointedit.training.stages import ModelBundle, normalize_range

CALIB = default_calibration()


def report(capsys, num, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {num} {name}: {detail}"
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


# -- 1: geometry primitives ------------------------------------------------------

def test_1_geometry(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    n = 10_000
    r = rng.uniform(0.1, 50, n)
    phi = rng.uniform(-1.2, 1.2, n)
    theta = rng.uniform(-3.0, 3.0, n)
    p = geo.spherical_to_cartesian(r, phi, theta)
    r2, phi2, theta2 = geo.cartesian_to_spherical(p)
    rt = max(np.abs(r2 - r).max() / r.max(), np.abs(phi2 - phi).max(),
             np.abs(theta2 - theta).max())
    assert rt <= 1e-9

    # decode(encode): every decoded point within half a bin of an input
    m = 300
    r = rng.uniform(1.0, 35.0, m)
    phi = rng.uniform(CALIB.phi_min + 1e-3, CALIB.phi_max - 1e-3, m)
    theta = rng.uniform(CALIB.theta_min + 1e-3, CALIB.theta_max - 1e-3, m)
    pts = geo.spherical_to_cartesian(r, phi, theta)
    dec = geo.decode_range(geo.encode_range(pts, CALIB))
    bound = r.max() * math.sqrt((CALIB.phi_step / 2) ** 2
                                + (CALIB.theta_step / 2) ** 2) * (1 + 1e-6) + 1e-5
    for q in dec:
        assert np.linalg.norm(pts - q, axis=1).min() <= bound

    # projection equals the homogeneous-matrix oracle
    p = rng.uniform(-3, 3, (500, 3)) + np.array([0, 12.0, 0])
    uv, d, ok = geo.project_to_image(p, CALIB)
    k = np.array([[CALIB.fx, 0, CALIB.cx], [0, CALIB.fy, CALIB.cy], [0, 0, 1.0]])
    hom = (p @ CALIB.r_cr.T + CALIB.t_cr) @ k.T
    assert ok.all()
    assert np.abs(uv - hom[:, :2] / hom[:, 2:3]).max() <= 1e-9
    assert np.abs(d - hom[:, 2]).max() <= 1e-9

    # correspondence map: bitwise equal to per-cell manual composition
    data = np.full((CALIB.n_phi, CALIB.n_theta), geo.INVALID, dtype=np.float32)
    sel = rng.random(data.shape) < 0.7
    data[sel] = rng.uniform(2.0, 30.0, sel.sum()).astype(np.float32)
    ri = geo.RangeImage(data, CALIB)
    s = 8
    cmap = geo.build_correspondence(ri, CALIB, s)
    coarse = geo.downsample_range(ri, s)
    h, w = coarse.shape
    theta_step = (CALIB.theta_max - CALIB.theta_min) / w
    phi_step = (CALIB.phi_max - CALIB.phi_min) / h
    checked = 0
    for i in range(h):
        for j in range(w):
            if not cmap.valid[i, j]:
                continue
            th = CALIB.theta_min + (j + 0.5) * theta_step
            ph = CALIB.phi_min + (i + 0.5) * phi_step
            q = geo.spherical_to_cartesian(np.float64(coarse[i, j]), ph, th)
            uv, d, ok = geo.project_to_image(np.asarray(q).reshape(1, 3), CALIB)
            assert ok[0]
            assert np.float32(uv[0, 0] / s) == cmap.u[i, j]
            assert np.float32(uv[0, 1] / s) == cmap.v[i, j]
            assert np.float32(d[0]) == cmap.d[i, j]
            checked += 1
    assert checked > 20

    dt = time.perf_counter() - t0
    report(capsys, 1, "geometry primitives", dt < 10.0,
           f"round trip {rt:.1e}, matrix oracle and composition exact, {dt:.1f}s")


# -- 2: gradient checks ----------------------------------------------------------

def _fd_worst(tensors, loss_fn, rng, n_per=2, h=1e-5):
    """Central finite differences against accumulated analytic grads."""
    for t in tensors:
        t.grad = None
    loss_fn(grad=True).backward()
    worst = 0.0
    for t in tensors:
        # 0-d data may have decayed to an immutable numpy scalar; the FD
        # loop needs a mutable view
        t.data = np.asarray(t.data)
        flat = t.data.reshape(-1)
        nn = flat.size
        picks = (np.arange(nn) if nn <= n_per
                 else rng.choice(nn, size=n_per, replace=False))
        g = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        for i in picks:
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            fp = loss_fn(grad=False)
            flat[i] = orig - step
            fm = loss_fn(grad=False)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6))
    return worst


def _f64_and_wake(module, rng, noise=0.03):
    """Cast every tensor to float64 and nudge params off exact zero so
    zero-initialized paths carry gradient."""
    for t in module.named_tensors().values():
        t.data = t.data.astype(np.float64)
    for p in module.named_params().values():
        # np.asarray: 0-d arithmetic yields immutable scalars otherwise
        p.data = np.asarray(p.data + rng.normal(0.0, noise, p.data.shape))


def _grid_maps(rng, hr=2, wr=4, hi=4, wi=4):
    def away(a):
        return np.where(np.abs(a - np.round(a)) < 0.1, a + 0.17, a)

    ref_rng = np.stack([away(rng.uniform(0.4, wi - 1.4, (1, hr, wr))),
                        away(rng.uniform(0.4, hi - 1.4, (1, hr, wr)))], axis=-1)
    ref_img = np.stack([away(rng.uniform(0.4, wr - 1.4, (1, hi, wi))),
                        away(rng.uniform(0.4, hr - 1.4, (1, hi, wi)))], axis=-1)
    return ExchangeMaps(ref_rng, rng.uniform(2, 20, (1, hr, wr)),
                        np.ones((1, hr, wr), bool), ref_img,
                        rng.uniform(2, 20, (1, hi, wi)),
                        np.ones((1, hi, wi), bool), max_range=40.0)


def test_2_gradients(capsys):
    t0 = time.perf_counter()
    rows = gradcheck.op_suite()
    assert len(rows) >= 30
    bad = [(n, e, tol) for n, e, tol in rows if e > tol]
    assert not bad, f"op checks failed: {bad}"
    op_worst = max(e for _, e, _ in rows)

    # full single-branch denoisers, float64, standard tolerance
    rng = np.random.default_rng(5)
    branch_worst = 0.0
    for seed in (1, 2):
        den = Denoiser(np.random.default_rng(seed), width=8, temb_dim=16,
                       token_dim=16)
        _f64_and_wake(den, rng)
        z = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True,
                   dtype=np.float64)
        cond = Tensor(rng.standard_normal((1, 5, 8, 8)), dtype=np.float64)
        tok = Tensor(rng.standard_normal((1, 16)), dtype=np.float64)
        w_out = rng.standard_normal((1, 4, 8, 8))

        def loss_fn(grad):
            if grad:
                return ad.mean(ad.mul(den(z, cond, 37, tok), Tensor(w_out)))
            with ad.no_grad():
                return float(ad.mean(
                    ad.mul(den(z, cond, 37, tok), Tensor(w_out))).data)

        tensors = [z] + list(den.named_params().values())
        branch_worst = max(branch_worst, _fd_worst(tensors, loss_fn, rng))
    assert branch_worst <= 1e-4

    # joint model including the deformable exchange, looser tolerance
    jd = JointDenoiser(np.random.default_rng(3), width=8, temb_dim=16,
                       token_dim=16, k_points=4)
    _f64_and_wake(jd, rng)
    maps = _grid_maps(rng)
    zi = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True,
                dtype=np.float64)
    zr = Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True,
                dtype=np.float64)
    ci = Tensor(rng.standard_normal((1, 5, 8, 8)), dtype=np.float64)
    cr = Tensor(rng.standard_normal((1, 5, 4, 8)), dtype=np.float64)
    ti = Tensor(rng.standard_normal((1, 16)), dtype=np.float64)
    tr = Tensor(rng.standard_normal((1, 16)), dtype=np.float64)
    wi = rng.standard_normal((1, 4, 8, 8))
    wr = rng.standard_normal((1, 4, 4, 8))

    def joint_loss(grad):
        def build():
            ei, er = jd(zi, ci, zr, cr, 11, ti, tr, maps)
            return ad.add(ad.mean(ad.mul(ei, Tensor(wi))),
                          ad.mean(ad.mul(er, Tensor(wr))))
        if grad:
            return build()
        with ad.no_grad():
            return float(build().data)

    tensors = [zi, zr] + list(jd.named_params().values())
    joint_worst = _fd_worst(tensors, joint_loss, rng, n_per=1)
    assert joint_worst <= 1e-3

    dt = time.perf_counter() - t0
    report(capsys, 2, "gradient checks", dt < 300.0,
           f"{len(rows)} ops worst {op_worst:.1e}, branches {branch_worst:.1e} "
           f"<= 1e-4, joint {joint_worst:.1e} <= 1e-3, {dt:.0f}s")


# -- 3: diffusion statistics -----------------------------------------------------

def test_3_diffusion_statistics(capsys):
    t0 = time.perf_counter()
    s = diffusion.NoiseSchedule(timesteps=200, beta_start=1e-4, beta_end=2e-2)
    rng = np.random.default_rng(0)

    n = 10_000
    x0 = np.full((n,), 0.7, dtype=np.float64)
    t = 120
    xt = diffusion.q_sample(x0, t, rng.standard_normal(n), s)
    ab = s.abar(t)
    mean_err = abs(xt.mean() - np.sqrt(ab) * 0.7)
    mean_bound = 4 * np.sqrt(1 - ab) / np.sqrt(n)
    assert mean_err <= mean_bound
    var_rel = abs(xt.var() - (1 - ab)) / (1 - ab)
    assert var_rel <= 0.05

    x0 = rng.uniform(-1, 1, (4, 4)).astype(np.float64)

    def oracle(x, tt):
        abt = s.abar(tt)
        return (x - np.sqrt(abt) * x0) / np.sqrt(1 - abt)

    out = diffusion.reverse_trajectory(oracle, rng.standard_normal((4, 4)), s,
                                       rng=None)
    rec_err = np.abs(out - x0).max()
    assert rec_err <= 1e-3

    dt = time.perf_counter() - t0
    report(capsys, 3, "diffusion statistics", dt < 60.0,
           f"marginal mean off {mean_err:.2e} (bound {mean_bound:.2e}), "
           f"var off {var_rel:.1%}, oracle recovery {rec_err:.1e}, {dt:.1f}s")


# -- 4: zero-gate isolation ------------------------------------------------------

def test_4_zero_gate_isolation(capsys):
    rng = np.random.default_rng(9)
    jd = JointDenoiser(np.random.default_rng(3), width=8, temb_dim=16,
                       token_dim=16)
    maps = _grid_maps(rng)
    args = dict(t=7)
    zi = Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
    ci = Tensor(rng.normal(size=(1, 5, 8, 8)).astype(np.float32))
    zr = Tensor(rng.normal(size=(1, 4, 4, 8)).astype(np.float32))
    cr = Tensor(rng.normal(size=(1, 5, 4, 8)).astype(np.float32))
    ti = Tensor(rng.normal(size=(1, 16)).astype(np.float32))
    tr = Tensor(rng.normal(size=(1, 16)).astype(np.float32))

    with ad.no_grad():
        ei0, er0 = jd(zi, ci, zr, cr, args["t"], ti, tr, maps,
                      force_zero_gates=True)
        # perturb the range branch: image output must not move, and vice versa
        zr2 = Tensor(zr.data + rng.normal(size=zr.shape).astype(np.float32))
        cr2 = Tensor(cr.data + rng.normal(size=cr.shape).astype(np.float32))
        ei1, _ = jd(zi, ci, zr2, cr2, args["t"], ti, tr, maps,
                    force_zero_gates=True)
        zi2 = Tensor(zi.data + rng.normal(size=zi.shape).astype(np.float32))
        ci2 = Tensor(ci.data + rng.normal(size=ci.shape).astype(np.float32))
        _, er1 = jd(zi2, ci2, zr, cr, args["t"], ti, tr, maps,
                    force_zero_gates=True)
        assert np.array_equal(ei1.data, ei0.data)
        assert np.array_equal(er1.data, er0.data)

        # freshly initialized gates are exact zeros: same outputs without forcing
        ei2, er2 = jd(zi, ci, zr, cr, args["t"], ti, tr, maps,
                      force_zero_gates=False)
        assert np.array_equal(ei2.data, ei0.data)
        assert np.array_equal(er2.data, er0.data)

    # deformable attention at init is a plain bilinear lookup of the value
    # projection (offsets zero, uniform single-point weight)
    att = DeformableCrossAttention(8, np.random.default_rng(1), k_points=4)
    zq = Tensor(rng.normal(size=(2, 8, 2, 4)).astype(np.float32))
    zs = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
    m2 = _grid_maps(np.random.default_rng(2))
    ref = np.concatenate([m2.ref_rng, m2.ref_rng], axis=0)
    depth = np.concatenate([m2.depth_rng, m2.depth_rng], axis=0) / 40.0
    valid = np.concatenate([m2.valid_rng, m2.valid_rng], axis=0)
    with ad.no_grad():
        out = att(zq, zs, ref, depth, valid)
        v = att.value(zs)
        want = ad.bilinear_gather(v, Tensor(ref.reshape(2, 8, 2)))
        want = ad.reshape(ad.transpose(want, (0, 2, 1)), (2, 8, 2, 4))
    assert np.array_equal(out.data, want.data * valid.reshape(2, 1, 2, 4))

    report(capsys, 4, "zero-gate isolation", True,
           "branch isolation, init-gate equality, and init attention "
           "lookup all bitwise exact")


# -- 5: metric oracles -----------------------------------------------------------

def _chamfer_loops(a, b):
    ab = sum(float(np.sqrt(((q - b) ** 2).sum(axis=1)).min()) for q in a)
    ba = sum(float(np.sqrt(((q - a) ** 2).sum(axis=1)).min()) for q in b)
    return 0.5 * (ab / len(a) + ba / len(b))


def _das_loops(points, depth_ref, calib, mask=None):
    h, w = depth_ref.shape
    buf = {}
    for p in np.asarray(points, dtype=np.float64):
        pc = calib.r_cr @ p + calib.t_cr
        if pc[2] <= 0:
            continue
        u = calib.fx * pc[0] / pc[2] + calib.cx
        v = calib.fy * pc[1] / pc[2] + calib.cy
        px, py = int(round(u)), int(round(v))
        if 0 <= px < w and 0 <= py < h:
            key = (py, px)
            if key not in buf or pc[2] < buf[key]:
                buf[key] = pc[2]
    errs = [abs(d - depth_ref[py, px]) for (py, px), d in buf.items()
            if depth_ref[py, px] > 0 and (mask is None or mask[py, px])]
    if not errs:
        raise DomainError("no jointly covered pixels")
    return float(np.mean(errs))


def test_5_metric_oracles(capsys):
    rng = np.random.default_rng(12)

    def cloud(seed, n=200):
        r = np.random.default_rng(seed)
        y = r.uniform(4.0, 20.0, n)
        return np.stack([r.uniform(-0.3, 0.3, n) * y, y,
                         r.uniform(-0.3, 0.3, n) * y], axis=-1)

    cd_err = max(abs(metrics.chamfer(cloud(2 * k), cloud(2 * k + 1))
                     - _chamfer_loops(cloud(2 * k), cloud(2 * k + 1)))
                 for k in range(3))
    assert cd_err <= 1e-9

    dref = rng.uniform(5.0, 15.0, (CALIB.img_h, CALIB.img_w))
    das_err = max(abs(metrics.das(cloud(50 + k), dref, CALIB)
                      - _das_loops(cloud(50 + k), dref, CALIB))
                  for k in range(3))
    assert das_err <= 1e-9

    # depth shift by delta along camera rays scores exactly delta
    pts, _, _ = geo.unproject_depth(dref, CALIB)
    assert metrics.das(pts, dref, CALIB) == 0.0
    delta = 0.75
    pc = pts @ CALIB.r_cr.T + CALIB.t_cr
    pc *= ((pc[:, 2] + delta) / pc[:, 2])[:, None]
    shifted = (pc - CALIB.t_cr) @ CALIB.r_cr
    tr_err = abs(metrics.das(shifted, dref, CALIB) - delta)
    assert tr_err <= 1e-9

    report(capsys, 5, "metric oracles", True,
           f"chamfer vs loops {cd_err:.1e}, depth score vs loops "
           f"{das_err:.1e}, shift property off by {tr_err:.1e}")


# -- 6 & 7: trained pipeline -----------------------------------------------------

@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Five stages at shipped settings on the 64-sample corpus."""
    cfg = load_config(None, [])
    root = tmp_path_factory.mktemp("overfit")
    t0 = time.perf_counter()
    build_corpus(root / "corpus", cfg)
    corpus = Corpus(root / "corpus")
    runner = StageRunner(cfg, corpus, root / "run")
    for stage in (1, 2, 3, 4, 5):
        runner.run_stage(stage)
    seconds = time.perf_counter() - t0
    return cfg, corpus, root / "run", seconds


def _reuse_edit(corpus, editor, sid, seed):
    req = editing.request_from_corpus(corpus, sid, seed=seed)
    return editor.edit(req)


def test_6_overfit_pipeline(capsys, overfit):
    cfg, corpus, run_dir, seconds = overfit
    assert seconds <= 7200.0

    # (a) stage-1 range codec fidelity over the train split
    bundle = ModelBundle(cfg)
    bundle.load_available(load_checkpoint(run_dir / "stage1.ckpt")["tensors"])
    vals = []
    for sid in corpus.ids("train"):
        x = normalize_range(corpus.load(sid, "range_obj"), CALIB.max_range)
        z = bundle.encode_mu(bundle.range_vae, x)
        with ad.no_grad():
            rec = bundle.range_vae.decode(Tensor(z[None])).data[0]
        vals.append(metrics.psnr(x[0], np.clip(rec[0], 0.0, 1.0)))
    vae_psnr = float(np.mean(vals))

    # (b) edited-image fidelity on held-in scenes, (c) geometry vs pure noise
    editor = editing.Editor(cfg, [run_dir / "stage5.ckpt"])
    train_ids = corpus.ids("train")[:6]
    psnrs, cds, noise_cds = [], [], []
    for k, sid in enumerate(train_ids):
        res = _reuse_edit(corpus, editor, sid, seed=k)
        gt_img = corpus.load(sid, "image_sh")
        gt_rng = corpus.load(sid, "range_obj")
        psnrs.append(metrics.psnr(res.image, gt_img, mask=res.mask_img))
        gt_pts = metrics.masked_points(gt_rng, CALIB, res.mask_rng)
        pred_pts = metrics.masked_points(res.range_image, CALIB, res.mask_rng)
        cds.append(metrics.chamfer(pred_pts, gt_pts))

        # same decoder fed the reverse chain's starting noise, no denoising
        conds = editor.prepare_conditions(
            editing.request_from_corpus(corpus, sid, seed=k))
        zi = np.random.default_rng(
            np.random.SeedSequence([k, 0])).standard_normal(
                (4,) + conds.cond_img.shape[1:]).astype(np.float32)
        zr = np.random.default_rng(
            np.random.SeedSequence([k, 1])).standard_normal(
                (4,) + conds.cond_rng.shape[1:]).astype(np.float32)
        _, noise_rng = editor.decode_latents(zi, zr, CALIB)
        _, noise_grid = editing.stitch(
            np.zeros_like(gt_img), noise_rng,
            corpus.load(sid, "image_bg"), corpus.load(sid, "range_bg"),
            res.mask_img, res.mask_rng, "mask-bounded")
        noise_pts = metrics.masked_points(noise_grid, CALIB, res.mask_rng)
        noise_cds.append(metrics.chamfer(noise_pts, gt_pts))

    edit_psnr = float(np.mean(psnrs))
    cd_gen = float(np.mean(cds))
    cd_noise = float(np.mean(noise_cds))
    ratio = cd_noise / cd_gen

    ok = (vae_psnr >= 25.0 and edit_psnr >= 20.0 and ratio >= 10.0)
    report(capsys, 6, "overfit pipeline", ok,
           f"trained in {seconds:.0f}s, range codec {vae_psnr:.1f}dB >= 25, "
           f"edit psnr {edit_psnr:.1f}dB >= 20, chamfer vs noise "
           f"{cd_gen:.3f} vs {cd_noise:.3f} ({ratio:.1f}x >= 10)")


def test_7_joint_vs_independent(capsys, overfit):
    cfg, corpus, run_dir, _ = overfit
    joint = editing.Editor(cfg, [run_dir / "stage5.ckpt"])
    ablated = editing.Editor(cfg, [run_dir / "stage2.ckpt",
                                   run_dir / "stage4.ckpt"])
    test_ids = corpus.ids("test")
    gaps, das_j, das_a = [], [], []
    for sid in test_ids:
        gt_img = corpus.load(sid, "image_sh")
        gt_rng = corpus.load(sid, "range_obj")
        for seed in (0, 1, 2):
            req = editing.request_from_corpus(corpus, sid, seed=seed)
            rj = joint.edit(req)
            ra = ablated.edit(req, force_zero_gates=True)
            ej = metrics.evaluate_sample(rj.image, rj.range_image, gt_img,
                                         gt_rng, CALIB, mask_img=rj.mask_img,
                                         mask_rng=rj.mask_rng)
            ea = metrics.evaluate_sample(ra.image, ra.range_image, gt_img,
                                         gt_rng, CALIB, mask_img=ra.mask_img,
                                         mask_rng=ra.mask_rng)
            das_j.append(ej["das_masked"])
            das_a.append(ea["das_masked"])
            gaps.append(ea["das_masked"] - ej["das_masked"])

    n = len(das_j)
    mean_j = float(np.mean(das_j))
    mean_a = float(np.mean(das_a))
    ok = n >= 32 and mean_j < mean_a
    report(capsys, 7, "joint vs independent sampling", ok,
           f"masked depth score {mean_j:.4f} (joint) vs {mean_a:.4f} "
           f"(independent), gap {mean_a - mean_j:+.4f} over {n} edits")


# -- 8: determinism and formats --------------------------------------------------

def test_8_determinism_and_formats(capsys, tmp_path, monkeypatch,
                                   pipeline_cfg, pipeline_corpus,
                                   pipeline_run):
    # corpus synthesis is byte-stable
    cfg = load_config(None, ["synth.count=4", "synth.seed=11"])
    build_corpus(tmp_path / "a", cfg)
    build_corpus(tmp_path / "b", cfg)
    man_a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert man_a == (tmp_path / "b" / "manifest.json").read_bytes()
    for f in sorted((tmp_path / "a" / "samples" / "0000").iterdir()):
        twin = tmp_path / "b" / "samples" / "0000" / f.name
        assert f.read_bytes() == twin.read_bytes()

    # editing is byte-stable end to end
    editor = editing.Editor(pipeline_cfg, [pipeline_run / "stage5.ckpt"])
    req = editing.request_from_corpus(pipeline_corpus, 0, seed=5, steps=8)
    editing.write_result(editor.edit(req), tmp_path / "e1")
    editing.write_result(editor.edit(req), tmp_path / "e2")
    names = sorted(p.name for p in (tmp_path / "e1").iterdir())
    assert "audit.json" in names and "image.f32" in names
    for name in names:
        assert (tmp_path / "e1" / name).read_bytes() == \
            (tmp_path / "e2" / name).read_bytes()

    # checkpoint round trip is bit-exact, including re-serialization
    src = pipeline_run / "stage5.ckpt"
    d = load_checkpoint(src)
    save_checkpoint(tmp_path / "rt.ckpt", d["stage"], d["step"], d["schedule"],
                    d["config_hash"], d["rng_state"], d["tensors"])
    assert (tmp_path / "rt.ckpt").read_bytes() == src.read_bytes()
    d2 = load_checkpoint(tmp_path / "rt.ckpt")
    assert set(d2["tensors"]) == set(d["tensors"])
    for k in d["tensors"]:
        assert d["tensors"][k].dtype == d2["tensors"][k].dtype
        assert np.array_equal(d["tensors"][k], d2["tensors"][k])

    # corpus tensor round trip is bit-exact and checksummed
    sample = tmp_path / "a" / "samples" / "0000" / "image_sh.f32"
    import json
    manifest = json.loads(man_a)
    entry = manifest["samples"][0]["files"]["image_sh"]
    assert sha256_file(sample) == entry["sha256"]
    arr = read_f32(sample, entry["shape"])
    write_f32(tmp_path / "rt.f32", arr)
    assert (tmp_path / "rt.f32").read_bytes() == sample.read_bytes()

    # a crash mid-save must leave nothing at the final checkpoint path
    from jointedit.training import checkpoint as ckpt_mod

    def boom(fd):
        raise OSError("simulated crash during fsync")

    monkeypatch.setattr(ckpt_mod.os, "fsync", boom)
    target = tmp_path / "crash.ckpt"
    with pytest.raises(OSError):
        save_checkpoint(target, 1, 0, d["schedule"], "x", "y",
                        {"t": np.zeros(3, np.float32)})
    assert not target.exists()
    monkeypatch.undo()

    report(capsys, 8, "determinism and formats", True,
           "synthesis, editing, checkpoints, and tensors byte-stable; "
           "interrupted save leaves no partial file")
