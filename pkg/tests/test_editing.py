"""Edit pipeline: condition assembly, joint sampling, stitching, output."""

import json
import logging

import numpy as np
import pytest

import jointedit.autodiff as ad
from jointedit import diffusion, editing, synth
from jointedit.autodiff import Tensor
from jointedit.errors import (DimensionError, PlacementError,
                              SequencingError, UsageError)
from jointedit.geometry import project_to_image, unproject_depth
from jointedit.ioformats import read_f32, sha256_file


@pytest.fixture(scope="module")
def editor(pipeline_cfg, pipeline_run):
    return editing.Editor(pipeline_cfg, [pipeline_run / "stage5.ckpt"])


@pytest.fixture(scope="module")
def request0(pipeline_corpus):
    return editing.request_from_corpus(pipeline_corpus, 0, seed=11, steps=6)


@pytest.fixture(scope="module")
def conds0(editor, request0):
    return editor.prepare_conditions(request0)


class TestRequest:
    def test_defaults_reuse_stored_scene(self, pipeline_corpus):
        spec = pipeline_corpus.scene(0)
        req = editing.request_from_corpus(pipeline_corpus, 0)
        assert req.proto == spec.proto
        assert req.pose == spec.pose
        assert req.obj_seed == spec.obj_seed
        assert req.tint == tuple(spec.tint)

    def test_overrides_take_fresh_appearance(self, pipeline_corpus):
        pose = synth.Pose(x=0.5, y=8.0, z=0.0, yaw=0.3)
        req = editing.request_from_corpus(pipeline_corpus, 0, proto="truck",
                                          pose=pose)
        assert req.proto == "truck"
        assert req.pose == pose
        assert req.obj_seed == 0


class TestPrepareConditions:
    def test_shapes(self, conds0, pipeline_cfg):
        z = pipeline_cfg.model.latent_channels
        assert conds0.cond_img.shape == (z + 1, 16, 16)
        assert conds0.cond_rng.shape == (z + 1, 8, 16)
        assert conds0.tok_img.shape == (pipeline_cfg.model.semantic_dim,)
        assert conds0.mask_img.shape == (64, 64) and conds0.mask_img.dtype == bool
        assert conds0.mask_rng.shape == (32, 64)
        cmap, ref_img, depth_img, valid_img = conds0.maps
        assert cmap.u.shape == (4, 8)
        assert ref_img.shape == (8, 8, 2)

    def test_deterministic(self, editor, request0, conds0):
        again = editor.prepare_conditions(request0)
        assert np.array_equal(again.cond_img, conds0.cond_img)
        assert np.array_equal(again.cond_rng, conds0.cond_rng)
        assert np.array_equal(again.tok_img, conds0.tok_img)
        assert np.array_equal(again.pasted_range.data, conds0.pasted_range.data)

    def test_range_paste_masked_vs_unmasked(self, request0, conds0):
        scene = np.asarray(request0.scene_range)
        pasted = conds0.pasted_range.data
        outside = ~conds0.mask_rng
        assert np.array_equal(pasted[outside], scene[outside])
        changed = (pasted != scene) & conds0.mask_rng
        assert changed.any()
        # in-mask cells hold prior-derived returns or are cleared to invalid
        assert ((pasted[changed] > 0) | (pasted[changed] == -1.0)).all()
        assert (pasted[changed] > 0).any()

    def test_latent_mask_channel_binary(self, conds0):
        assert set(np.unique(conds0.cond_img[-1])) <= {0.0, 1.0}
        assert conds0.cond_img[-1].any()
        assert set(np.unique(conds0.cond_rng[-1])) <= {0.0, 1.0}

    def test_offscreen_pose_rejected(self, editor, request0):
        import dataclasses
        bad = dataclasses.replace(request0,
                                  pose=synth.Pose(x=0.0, y=-10.0, z=0.0, yaw=0.0))
        with pytest.raises(PlacementError):
            editor.prepare_conditions(bad)

    def test_bad_mode_rejected(self, editor, request0):
        import dataclasses
        with pytest.raises(UsageError):
            editor.prepare_conditions(dataclasses.replace(request0, mode="inpaint"))

    def test_cmap_matches_direct_depth_projection(self, request0, conds0):
        # two paths to image coordinates: range cells pasted from the prior
        # and then projected, vs projecting the rendered depth directly
        cmap = conds0.maps[0]
        calib = request0.calib
        from jointedit.geometry import RangeImage, downsample_range
        coarse_pasted = downsample_range(conds0.pasted_range, 8)
        coarse_scene = downsample_range(
            RangeImage(np.asarray(request0.scene_range, np.float32), calib), 8)
        prior_cells = (coarse_pasted != coarse_scene) & cmap.valid
        assert prior_cells.any()

        pts, _, _ = unproject_depth(conds0.prior_depth.astype(np.float64), calib)
        uv, _, ok = project_to_image(pts, calib)
        direct = uv[ok] / 8.0
        for i, j in zip(*np.nonzero(prior_cells)):
            d = np.hypot(direct[:, 0] - cmap.u[i, j],
                         direct[:, 1] - cmap.v[i, j]).min()
            assert d <= 1.0, f"cell ({i},{j}) is {d:.2f} latent cells off"


class TestJointSample:
    def test_same_seed_bit_identical(self, editor, conds0):
        a = editor.joint_sample(conds0, 21, steps=4)
        b = editor.joint_sample(conds0, 21, steps=4)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        c = editor.joint_sample(conds0, 22, steps=4)
        assert not np.array_equal(a[0], c[0])

    def test_zero_gates_equal_independent_branches(self, editor, conds0):
        steps, seed = 4, 13
        zi, zr = editor.joint_sample(conds0, seed, steps=steps,
                                     force_zero_gates=True)
        b = editor.bundle
        sched = editor.schedule

        def single(branch, cond, tok, key, shape):
            rng = np.random.default_rng(np.random.SeedSequence([seed, key]))
            x = rng.standard_normal(shape).astype(np.float32)
            with ad.no_grad():
                for t in range(steps, 0, -1):
                    eps = branch(Tensor(x), Tensor(cond[None]), t,
                                 Tensor(tok[None]))
                    x = diffusion.ddpm_step(
                        x, eps.data, t, sched,
                        rng.standard_normal(shape).astype(np.float32))
            return x[0]

        si = single(b.joint.image, conds0.cond_img, conds0.tok_img, 0,
                    (1, 4, 16, 16))
        sr = single(b.joint.range, conds0.cond_rng, conds0.tok_rng, 1,
                    (1, 4, 8, 16))
        assert np.array_equal(zi, si)
        assert np.array_equal(zr, sr)

    def test_step_override_bounds(self, editor, conds0):
        with pytest.raises(UsageError):
            editor.joint_sample(conds0, 1, steps=0)
        with pytest.raises(UsageError):
            editor.joint_sample(conds0, 1, steps=10_000)

    def test_step_override_audited(self, editor, request0, caplog):
        with caplog.at_level(logging.INFO, logger="jointedit.editing"):
            res = editor.edit(request0)
        assert res.audit["steps_run"] == 6
        assert any("6 steps" in r.message for r in caplog.records)


class TestCheckpointLoading:
    def test_stage_combo_warns_below_five(self, pipeline_cfg, pipeline_run,
                                          caplog):
        with caplog.at_level(logging.WARNING, logger="jointedit.editing"):
            ed = editing.Editor(pipeline_cfg, [pipeline_run / "stage2.ckpt",
                                               pipeline_run / "stage4.ckpt"])
        assert any("stage 4" in r.message for r in caplog.records)
        assert ed.stage == 4
        assert None not in ed.bundle.scales.values()

    def test_stage5_does_not_warn(self, pipeline_cfg, pipeline_run, caplog):
        with caplog.at_level(logging.WARNING, logger="jointedit.editing"):
            editing.Editor(pipeline_cfg, pipeline_run / "stage5.ckpt")
        assert not caplog.records

    def test_initial_gates_match_forced_zero(self, pipeline_cfg, pipeline_run,
                                             conds0):
        # exchange initializes with zero gates, so a stage-2+4 combo must
        # sample exactly like an explicit ablation run
        ed = editing.Editor(pipeline_cfg, [pipeline_run / "stage2.ckpt",
                                           pipeline_run / "stage4.ckpt"])
        a = ed.joint_sample(conds0, 5, steps=3)
        b = ed.joint_sample(conds0, 5, steps=3, force_zero_gates=True)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_missing_scales_rejected(self, pipeline_cfg, pipeline_run):
        # a VAE-only checkpoint carries no latent scale factors
        with pytest.raises(SequencingError):
            editing.Editor(pipeline_cfg, pipeline_run / "stage1.ckpt")

    def test_no_checkpoints_rejected(self, pipeline_cfg):
        with pytest.raises(UsageError):
            editing.Editor(pipeline_cfg, [])


class TestStitch:
    def test_mask_bounded_outside_untouched(self, editor, request0):
        res = editor.edit(request0)
        out_i = ~res.mask_img
        out_r = ~res.mask_rng
        assert np.array_equal(res.image[out_i], request0.scene_image[out_i])
        assert np.array_equal(res.range_image[out_r],
                              request0.scene_range[out_r])
        assert not np.array_equal(res.image, request0.scene_image)

    def test_all_zero_mask_returns_scene(self, request0):
        dec_i = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        dec_r = np.random.default_rng(1).random((32, 64)).astype(np.float32)
        img, rng = editing.stitch(dec_i, dec_r, request0.scene_image,
                                  request0.scene_range,
                                  np.zeros((64, 64), bool),
                                  np.zeros((32, 64), bool), "mask-bounded")
        assert np.array_equal(img, request0.scene_image)
        assert np.array_equal(rng, request0.scene_range)

    def test_unconstrained_keeps_decoded_frames(self, request0):
        dec_i = np.full((64, 64, 3), 0.25, np.float32)
        dec_r = np.full((32, 64), 3.0, np.float32)
        img, rng = editing.stitch(dec_i, dec_r, request0.scene_image,
                                  request0.scene_range,
                                  np.zeros((64, 64), bool),
                                  np.zeros((32, 64), bool), "unconstrained")
        assert np.array_equal(img, dec_i)
        assert np.array_equal(rng, dec_r)

    def test_unconstrained_edit_touches_outside_mask(self, editor, request0):
        import dataclasses
        req = dataclasses.replace(request0, mode="unconstrained")
        res = editor.edit(req)
        outside = ~res.mask_img
        assert (res.image[outside] != req.scene_image[outside]).any()

    def test_errors(self, request0):
        dec_i = np.zeros((64, 64, 3), np.float32)
        dec_r = np.zeros((32, 64), np.float32)
        m_i = np.zeros((64, 64), bool)
        m_r = np.zeros((32, 64), bool)
        with pytest.raises(UsageError):
            editing.stitch(dec_i, dec_r, request0.scene_image,
                           request0.scene_range, m_i, m_r, "blend")
        with pytest.raises(DimensionError):
            editing.stitch(dec_i[:32], dec_r, request0.scene_image,
                           request0.scene_range, m_i, m_r, "mask-bounded")


class TestWriteResult:
    def test_outputs_and_audit(self, editor, request0, tmp_path):
        res = editor.edit(request0)
        audit_path = editing.write_result(res, tmp_path / "e")
        audit = json.loads(audit_path.read_text())
        assert audit["seed"] == 11
        assert audit["steps_run"] == 6
        assert audit["checkpoints"][0]["stage"] == 5
        assert len(audit["checkpoints"][0]["sha256"]) == 64
        assert "config_sha256" in audit
        shp = tuple(audit["files"]["image"]["shape"])
        img = read_f32(tmp_path / "e" / "image.f32", shp)
        assert np.array_equal(img, res.image)
        assert (sha256_file(tmp_path / "e" / "image.f32")
                == audit["files"]["image"]["sha256"])
        assert (tmp_path / "e" / "points.ply").exists()
        assert (tmp_path / "e" / "image.ppm").exists()

    def test_same_seed_byte_identical(self, editor, request0, tmp_path):
        editing.write_result(editor.edit(request0), tmp_path / "a")
        editing.write_result(editor.edit(request0), tmp_path / "b")
        a_files = sorted(p.name for p in (tmp_path / "a").iterdir())
        b_files = sorted(p.name for p in (tmp_path / "b").iterdir())
        assert a_files == b_files
        for name in a_files:
            assert (sha256_file(tmp_path / "a" / name)
                    == sha256_file(tmp_path / "b" / name)), name


class TestDecode:
    def test_points_come_from_range(self, editor, request0):
        from jointedit.geometry import RangeImage, decode_range
        res = editor.edit(request0)
        pts = decode_range(RangeImage(res.range_image, request0.calib))
        assert np.array_equal(res.points, pts)
        assert res.points.shape[1] == 3
