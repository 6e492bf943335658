"""End-to-end command-line contract: flags, exit codes, artifacts."""

import json

import numpy as np
import pytest

from jointedit import cli
from jointedit.ioformats import read_ppm, write_f32

from conftest import PIPELINE_SETS


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


class TestParsing:
    def test_bare_invocation_is_usage(self, capsys):
        code, _, err = run(capsys, )
        assert code == 64
        assert "usage" in err

    def test_unknown_command_is_usage(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 64
        assert "invalid choice" in err

    def test_version_names_build_and_format(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "jointedit build " in out
        assert "checkpoint-format 1" in out
        token = out.split("build ")[1].split()[0]
        assert len(token) == 16

    def test_missing_config_file_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "c"),
                           "--config", str(tmp_path / "nope.json"))
        assert code == 2
        assert "nope.json" in err

    def test_unknown_set_key_is_usage(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "c"),
                           "--set", "synth.bogus=1")
        assert code == 64


class TestSynth:
    def test_zero_count_rejected(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--count", "0",
                           "--out", str(tmp_path / "c"))
        assert code == 2
        assert "count must be positive" in err

    def test_unwritable_out_is_io_error(self, capsys, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, _ = run(capsys, "synth", "--count", "2", "--seed", "5",
                         "--out", str(blocker / "sub"))
        assert code == 2

    def test_repeat_runs_are_byte_identical(self, capsys, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code, msg, _ = run(capsys, "synth", "--count", "2", "--seed", "7",
                               "--out", str(out))
            assert code == 0
            assert "wrote 2 samples" in msg
            outs.append((out / "manifest.json").read_bytes())
        assert outs[0] == outs[1]

    def test_manifest_records_shapes_and_checksums(self, capsys, tmp_path):
        out = tmp_path / "c"
        code, _, _ = run(capsys, "synth", "--count", "2", "--seed", "7",
                         "--out", str(out))
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["count"] == 2
        assert len(manifest["samples"]) == 2
        files = manifest["samples"][0]["files"]
        assert files["image_sh"]["shape"] == [64, 64, 3]
        assert files["range_obj"]["shape"] == [32, 64]
        assert len(files["image_sh"]["sha256"]) == 64

    def test_shadows_off_copies_flat_render(self, capsys, tmp_path):
        out = tmp_path / "c"
        code, _, _ = run(capsys, "synth", "--count", "2", "--seed", "7",
                         "--shadows", "off", "--out", str(out))
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["shadows"] is False
        files = manifest["samples"][0]["files"]
        assert files["image_sh"]["sha256"] == files["image_nosh"]["sha256"]


class TestTrain:
    def test_out_of_range_stage_is_usage(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--stage", "6",
                           "--data", str(tmp_path), "--out", str(tmp_path))
        assert code == 64
        assert "invalid choice" in err

    def test_missing_prerequisite_is_sequencing(self, capsys, tmp_path,
                                                pipeline_corpus_dir):
        code, _, err = run(capsys, "train", "--stage", "2",
                           "--data", str(pipeline_corpus_dir),
                           "--out", str(tmp_path / "run"),
                           *sum((["--set", s] for s in PIPELINE_SETS), []))
        assert code == 3
        assert "stage" in err


class TestEdit:
    def test_malformed_pose_is_usage(self, capsys, tmp_path,
                                     pipeline_corpus_dir):
        code, _, err = run(capsys, "edit", "--scene", "0",
                           "--data", str(pipeline_corpus_dir),
                           "--ckpt", "unused.ckpt", "--pose", "1.0;8.0;0.3",
                           "--out", str(tmp_path / "e"))
        assert code == 64
        assert "pose" in err

    def test_unknown_prototype_is_usage(self, capsys, tmp_path,
                                        pipeline_corpus_dir):
        code, _, err = run(capsys, "edit", "--scene", "0",
                           "--data", str(pipeline_corpus_dir),
                           "--ckpt", "unused.ckpt", "--proto", "zeppelin",
                           "--out", str(tmp_path / "e"))
        assert code == 64
        assert "zeppelin" in err

    def test_missing_checkpoint_is_io_error(self, capsys, tmp_path,
                                            pipeline_corpus_dir):
        code, _, _ = run(capsys, "edit", "--scene", "0",
                         "--data", str(pipeline_corpus_dir),
                         "--ckpt", str(tmp_path / "absent.ckpt"),
                         "--out", str(tmp_path / "e"))
        assert code == 2

    def test_vae_only_checkpoint_is_sequencing(self, capsys, tmp_path,
                                               pipeline_corpus_dir,
                                               pipeline_run):
        code, _, _ = run(capsys, "edit", "--scene", "0",
                         "--data", str(pipeline_corpus_dir),
                         "--ckpt", str(pipeline_run / "stage1.ckpt"),
                         "--out", str(tmp_path / "e"),
                         *sum((["--set", s] for s in PIPELINE_SETS), []))
        assert code == 3

    def test_edit_then_eval_chain(self, capsys, tmp_path, pipeline_corpus_dir,
                                  pipeline_run):
        edit_dir = tmp_path / "edit0"
        sets = sum((["--set", s] for s in PIPELINE_SETS), [])
        code, msg, _ = run(capsys, "edit", "--scene", "0",
                           "--data", str(pipeline_corpus_dir),
                           "--ckpt", str(pipeline_run / "stage5.ckpt"),
                           "--seed", "4", "--steps", "4",
                           "--out", str(edit_dir), *sets)
        assert code == 0
        assert "4 steps" in msg
        audit = json.loads((edit_dir / "audit.json").read_text())
        assert audit["scene"] == 0
        assert audit["steps_run"] == 4

        report = tmp_path / "report.json"
        code, msg, _ = run(capsys, "eval", "--pred", str(edit_dir),
                           "--ref", str(pipeline_corpus_dir),
                           "--out", str(report))
        assert code == 0
        assert "1 samples" in msg
        body = json.loads(report.read_text())
        assert body["count"] == 1
        assert set(body["aggregates"]) >= {"cd", "das", "psnr", "psnr_masked"}
        assert report.with_suffix(".csv").is_file()


class TestEval:
    def test_reference_scores_itself_perfectly(self, capsys, tmp_path,
                                               pipeline_corpus_dir):
        report = tmp_path / "self.json"
        code, msg, _ = run(capsys, "eval", "--pred", str(pipeline_corpus_dir),
                           "--ref", str(pipeline_corpus_dir),
                           "--out", str(report))
        assert code == 0
        body = json.loads(report.read_text())
        assert body["count"] == 6
        assert body["aggregates"]["cd"] == 0.0
        assert body["aggregates"]["das"] == 0.0
        assert body["aggregates"]["psnr"] == 99.0

    def test_unrecognized_pred_dir_is_data_error(self, capsys, tmp_path,
                                                 pipeline_corpus_dir):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run(capsys, "eval", "--pred", str(empty),
                           "--ref", str(pipeline_corpus_dir),
                           "--out", str(tmp_path / "r.json"))
        assert code == 2
        assert "neither" in err


class TestGradcheckCmd:
    def test_single_op(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--op", "add")
        assert code == 0
        lines = [l for l in out.strip().split("\n") if "worst-rel-err" in l]
        assert len(lines) == 1
        assert lines[0].startswith("add ") and lines[0].endswith("ok")

    def test_unknown_op_lists_available(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--op", "warp9")
        assert code == 64
        assert "available" in err and "bilinear_map" in err

    def test_full_suite_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0
        assert "all 34 gradient checks passed" in out


class TestExportPpm:
    def test_rgb_roundtrip_with_explicit_shape(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3)).astype(np.float32)
        src = tmp_path / "img.f32"
        write_f32(src, img)
        dst = tmp_path / "img.ppm"
        code, _, _ = run(capsys, "export-ppm", str(src), str(dst),
                         "--shape", "8x8x3")
        assert code == 0
        back = read_ppm(dst)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_shape_inferred_from_corpus_manifest(self, capsys, tmp_path,
                                                 pipeline_corpus_dir):
        src = pipeline_corpus_dir / "samples" / "0000" / "image_sh.f32"
        dst = tmp_path / "scene.ppm"
        code, _, _ = run(capsys, "export-ppm", str(src), str(dst))
        assert code == 0
        assert read_ppm(dst).shape == (64, 64, 3)

    def test_scalar_grid_renders_gray(self, capsys, tmp_path,
                                      pipeline_corpus_dir):
        src = pipeline_corpus_dir / "samples" / "0000" / "range_obj.f32"
        dst = tmp_path / "range.ppm"
        code, _, _ = run(capsys, "export-ppm", str(src), str(dst))
        assert code == 0
        img = read_ppm(dst)
        assert img.shape == (32, 64, 3)
        assert np.array_equal(img[..., 0], img[..., 1])
        assert img.max() <= 1.0 and img.min() == 0.0

    def test_unknown_shape_is_usage(self, capsys, tmp_path):
        src = tmp_path / "blob.f32"
        write_f32(src, np.zeros((4, 4), np.float32))
        code, _, err = run(capsys, "export-ppm", str(src),
                           str(tmp_path / "o.ppm"))
        assert code == 64
        assert "--shape" in err

    def test_malformed_shape_is_usage(self, capsys, tmp_path):
        src = tmp_path / "blob.f32"
        write_f32(src, np.zeros((4, 4), np.float32))
        code, _, err = run(capsys, "export-ppm", str(src),
                           str(tmp_path / "o.ppm"), "--shape", "4xfour")
        assert code == 64

    def test_unrenderable_shape_is_data_error(self, capsys, tmp_path):
        src = tmp_path / "blob.f32"
        write_f32(src, np.zeros((4, 4, 2), np.float32))
        code, _, _ = run(capsys, "export-ppm", str(src),
                         str(tmp_path / "o.ppm"), "--shape", "4x4x2")
        assert code == 2
