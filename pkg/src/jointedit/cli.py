"""Command-line orchestration: corpus synthesis, staged training, editing,
evaluation, gradient verification, and preview export.

Exit codes are a stable contract: 0 success, 2 I/O or bad data, 3 stage
sequencing, 64 usage. Every command is deterministic given its flags,
config, and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, editing, gradcheck, metrics, synth
from .config import config_sha256, default_calibration, load_config
from .corpus import Corpus, build_corpus
from .errors import (ConfigError, FormatError, JointEditError,
                     SequencingError, UsageError)
from .ioformats import read_f32, write_ppm
from .training import StageRunner


def build_hash():
    """Digest of the package sources, printed by --version."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for pattern in ("*.py", "*.pyx"):
        for p in sorted(root.rglob(pattern)):
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the exit-code contract wants 64
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                   help="dotted config override, e.g. train.seed=3")


def _load_cfg(args, flag_sets=()):
    path = getattr(args, "config", None)
    if path is not None and not Path(path).is_file():
        raise FormatError(f"cannot read config {path}: no such file")
    # flags win over --set overrides, which win over the file
    return load_config(path, list(args.set) + list(flag_sets))


def _parse_pose(text):
    parts = text.split(",")
    try:
        x, y, yaw = (float(v) for v in parts)
    except ValueError:
        raise UsageError(
            f'pose must be "x,y,yaw" (three comma-separated numbers), '
            f"got {text!r}") from None
    return synth.Pose(x=x, y=y, z=0.0, yaw=yaw)


# -- commands -------------------------------------------------------------------

def cmd_synth(args):
    sets = []
    if args.seed is not None:
        sets.append(f"synth.seed={args.seed}")
    if args.count is not None:
        sets.append(f"synth.count={args.count}")
    if args.shadows is not None:
        sets.append(f"synth.shadows={'true' if args.shadows == 'on' else 'false'}")
    cfg = _load_cfg(args, sets)
    if cfg.synth.count <= 0:
        print("error: count must be positive", file=sys.stderr)
        return 2
    manifest = build_corpus(args.out, cfg)
    print(f"wrote {manifest['count']} samples to {args.out} "
          f"(config {config_sha256(cfg)[:12]})")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    corpus = Corpus(args.data)
    runner = StageRunner(cfg, corpus, args.out)
    path = runner.run_stage(args.stage, resume=args.resume)
    print(f"stage {args.stage} complete: {path}")
    return 0


def cmd_edit(args):
    cfg = _load_cfg(args)
    corpus = Corpus(args.data)
    pose = _parse_pose(args.pose) if args.pose is not None else None
    if args.proto is not None and args.proto not in synth.PROTOTYPES:
        raise UsageError(
            f"unknown prototype {args.proto!r}, expected one of {synth.PROTOTYPES}")
    req = editing.request_from_corpus(
        corpus, args.scene, proto=args.proto, pose=pose, mode=args.mode,
        seed=args.seed, steps=args.steps)
    editor = editing.Editor(cfg, args.ckpt)
    result = editor.edit(req, force_zero_gates=args.zero_gates)
    result.audit["scene"] = int(args.scene)
    audit = editing.write_result(result, args.out)
    print(f"edit written to {args.out} ({audit.name}: "
          f"{result.audit['steps_run']} steps, seed {args.seed})")
    return 0


def _edit_dirs(pred):
    if (pred / "audit.json").is_file():
        return [pred]
    subs = sorted(d for d in pred.iterdir()
                  if d.is_dir() and (d / "audit.json").is_file())
    if not subs:
        raise FormatError(
            f"{pred} is neither a corpus, an edit output, nor a directory "
            "of edit outputs")
    return subs


def _eval_records(pred, ref):
    calib = ref.calib
    records = []
    if (pred / "manifest.json").is_file():
        pc = Corpus(pred)
        for sid in pc.ids():
            records.append(metrics.evaluate_sample(
                pc.load(sid, "image_sh"), pc.load(sid, "range_obj"),
                ref.load(sid, "image_sh"), ref.load(sid, "range_obj"),
                calib,
                mask_img=ref.load(sid, "mask_c") > 0.5,
                mask_rng=ref.load(sid, "mask_r") > 0.5,
                sample_id=f"{sid:04d}"))
        return records
    for d in _edit_dirs(pred):
        with open(d / "audit.json") as f:
            audit = json.load(f)
        if "scene" not in audit:
            raise FormatError(f"{d}/audit.json does not name its scene sample")
        sid = int(audit["scene"])
        shp = {k: tuple(v["shape"]) for k, v in audit["files"].items()
               if "shape" in v}
        records.append(metrics.evaluate_sample(
            read_f32(d / "image.f32", shp["image"]),
            read_f32(d / "range.f32", shp["range"]),
            ref.load(sid, "image_sh"), ref.load(sid, "range_obj"), calib,
            mask_img=read_f32(d / "mask_img.f32", shp["mask_img"]) > 0.5,
            mask_rng=read_f32(d / "mask_rng.f32", shp["mask_rng"]) > 0.5,
            sample_id=d.name))
    return records


def cmd_eval(args):
    ref = Corpus(args.ref)
    records = _eval_records(Path(args.pred), ref)
    report = metrics.EvalReport.from_samples(records)
    out = Path(args.out)
    report.to_json(out)
    report.to_csv(out.with_suffix(".csv"))
    agg = ", ".join(f"{k}={v:.4g}" for k, v in sorted(report.aggregates.items()))
    print(f"{report.count} samples: {agg}")
    print(f"report: {out} / {out.with_suffix('.csv')}")
    return 0


def cmd_gradcheck(args):
    rows = gradcheck.op_suite()
    if args.op is not None:
        rows = [r for r in rows if r[0] == args.op]
        if not rows:
            names = ", ".join(name for name, _, _ in gradcheck.op_suite())
            raise UsageError(f"unknown op {args.op!r}; available: {names}")
    failed = 0
    for name, err, tol in rows:
        ok = err <= tol
        failed += 0 if ok else 1
        print(f"{name:20s} worst-rel-err {err:.3e}  tol {tol:.0e}  "
              f"{'ok' if ok else 'FAIL'}")
    if failed:
        print(f"{failed}/{len(rows)} gradient checks failed", file=sys.stderr)
        return 1
    print(f"all {len(rows)} gradient checks passed")
    return 0


def _tensor_shape(path):
    """Recover an .f32 tensor's shape from its sidecar metadata."""
    p = Path(path)
    audit = p.parent / "audit.json"
    if audit.is_file():
        with open(audit) as f:
            files = json.load(f).get("files", {})
        if p.stem in files and "shape" in files[p.stem]:
            return tuple(files[p.stem]["shape"])
    man = p.parent.parent.parent / "manifest.json"
    if man.is_file():
        try:
            sid = int(p.parent.name)
        except ValueError:
            return None
        with open(man) as f:
            manifest = json.load(f)
        for e in manifest.get("samples", []):
            if e["id"] == sid and p.stem in e["files"]:
                return tuple(e["files"][p.stem]["shape"])
    return None


def cmd_export_ppm(args):
    if args.shape is not None:
        try:
            shape = tuple(int(v) for v in args.shape.split("x"))
        except ValueError:
            raise UsageError(
                f"shape must look like HxW or HxWx3, got {args.shape!r}") from None
    else:
        shape = _tensor_shape(args.input)
        if shape is None:
            raise UsageError(
                f"cannot infer the shape of {args.input}; pass --shape HxW[x3]")
    arr = read_f32(args.input, shape)
    if arr.ndim == 2:
        # scalar grid (range/depth/mask): invalid cells black, rest scaled
        pos = arr[arr > 0]
        top = float(pos.max()) if pos.size else 1.0
        gray = np.clip(np.where(arr > 0, arr / top, 0.0), 0.0, 1.0)
        img = np.repeat(gray[..., None], 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] == 3:
        img = np.clip(arr, 0.0, 1.0)
    else:
        raise FormatError(f"cannot render shape {shape} as an image")
    write_ppm(args.output, img)
    print(f"wrote {args.output}")
    return 0


# -- parser ----------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="jointedit",
                     description="Joint camera/LiDAR scene editing pipeline.")
    parser.add_argument(
        "--version", action="version",
        version=(f"jointedit build {build_hash()} "
                 f"checkpoint-format {CHECKPOINT_FORMAT_VERSION}"))
    sub = parser.add_subparsers(dest="cmd", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--shadows", choices=("on", "off"))
    _add_config_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3, 4, 5))
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--resume", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("edit", help="insert an object into a stored scene")
    p.add_argument("--scene", type=int, required=True, help="corpus sample id")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint path (repeatable; later files win)")
    p.add_argument("--proto", help="prototype id; default: the sample's own")
    p.add_argument("--pose", help='"x,y,yaw"; default: the sample\'s own')
    p.add_argument("--mode", choices=editing.MODES, default="mask-bounded")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="reverse-step override")
    p.add_argument("--zero-gates", action="store_true",
                   help="force the cross-modality gates to zero (ablation)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("eval", help="score predictions against a corpus")
    p.add_argument("--pred", required=True,
                   help="corpus dir, edit output dir, or dir of edit outputs")
    p.add_argument("--ref", required=True, help="reference corpus directory")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", help="check one operation only")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-ppm", help="convert an .f32 tensor to PPM")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--shape", help="HxW or HxWx3 when no sidecar metadata")
    p.set_defaults(fn=cmd_export_ppm)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "fn", None) is None:
            parser.print_usage(sys.stderr)
            return 64
        logging.basicConfig(level=logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 64
    except SequencingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (JointEditError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
