"""On-disk corpus of rendered scene pairs.

Layout:
    <root>/manifest.json
    <root>/samples/<id:04d>/<tensor>.f32

The manifest pins the format version, generator seed, calibration, and per
sample the full scene description (so ground truth for edited poses can be
re-rendered), the split, and the shape + sha256 of every tensor file.
Building is deterministic: the same seed yields byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import conditions, synth
from .config import RunConfig, default_calibration
from .errors import CorruptionError, FormatError
from .geometry import Calibration
from .ioformats import read_f32, sha256_file, write_f32

CORPUS_FORMAT = 1
MIN_SILHOUETTE_PX = 40


def build_corpus(root, cfg: RunConfig):
    root = Path(root)
    calib = default_calibration(cfg.synth)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for sid in range(cfg.synth.count):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.synth.seed, sid]))
        spec = None
        tensors = None
        for _ in range(20):
            cand = synth.sample_scene(rng, cfg.synth.max_distractors)
            rendered = synth.render_sample(cand, calib)
            if (rendered["prior_sil"] > 0.5).sum() >= MIN_SILHOUETTE_PX:
                spec, tensors = cand, rendered
                break
        if spec is None:
            raise FormatError(f"sample {sid}: could not place a visible object")
        if not cfg.synth.shadows:
            tensors["image_sh"] = tensors["image_nosh"]
        mask_c = conditions.image_mask_from_silhouette(tensors["prior_sil"])
        mask_r = conditions.range_mask_from_depth(tensors["prior_depth"], calib)
        tensors["mask_c"] = mask_c.astype(np.float32)
        tensors["mask_r"] = mask_r.astype(np.float32)

        sdir = root / "samples" / f"{sid:04d}"
        sdir.mkdir(exist_ok=True)
        files = {}
        for name in sorted(tensors):
            arr = tensors[name]
            path = sdir / f"{name}.f32"
            write_f32(path, arr)
            files[name] = {"shape": list(arr.shape), "sha256": sha256_file(path)}
        entries.append({
            "id": sid,
            "split": "test" if sid % 5 == 4 else "train",
            "scene": spec.to_dict(),
            "files": files,
        })
    manifest = {
        "format": CORPUS_FORMAT,
        "seed": cfg.synth.seed,
        "count": cfg.synth.count,
        "shadows": cfg.synth.shadows,
        "calibration": calib.to_dict(),
        "samples": entries,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


class Corpus:
    """Read-only view over a built corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        try:
            with open(mpath) as f:
                self.manifest = json.load(f)
        except OSError as e:
            raise FormatError(f"cannot read corpus manifest: {e}") from None
        except json.JSONDecodeError as e:
            raise CorruptionError(f"{mpath}: invalid JSON: {e}") from None
        if self.manifest.get("format") != CORPUS_FORMAT:
            raise FormatError(
                f"{mpath}: corpus format {self.manifest.get('format')!r}, expected {CORPUS_FORMAT}")
        self.calib = Calibration.from_dict(self.manifest["calibration"])
        self._by_id = {e["id"]: e for e in self.manifest["samples"]}

    def ids(self, split=None):
        return [e["id"] for e in self.manifest["samples"]
                if split is None or e["split"] == split]

    def entry(self, sid):
        if sid not in self._by_id:
            raise FormatError(f"corpus has no sample {sid}")
        return self._by_id[sid]

    def scene(self, sid):
        return synth.SceneSpec.from_dict(self.entry(sid)["scene"])

    def load(self, sid, name):
        e = self.entry(sid)
        if name not in e["files"]:
            raise FormatError(f"sample {sid} has no tensor {name!r}")
        meta = e["files"][name]
        path = self.root / "samples" / f"{sid:04d}" / f"{name}.f32"
        return read_f32(path, tuple(meta["shape"]))

    def verify(self, sid):
        """Check stored hashes for one sample; raises CorruptionError."""
        e = self.entry(sid)
        for name, meta in e["files"].items():
            path = self.root / "samples" / f"{sid:04d}" / f"{name}.f32"
            got = sha256_file(path)
            if got != meta["sha256"]:
                raise CorruptionError(f"{path}: sha256 mismatch")
