"""Run configuration: a strict dataclass tree loaded from JSON.

Unknown keys are rejected so typos fail loudly instead of silently using a
default. `--set a.b.c=value` overrides parse the value as a JSON literal
when possible and as a bare string otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import Calibration


@dataclass
class ScheduleConfig:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class ModelConfig:
    vae_width: int = 32
    denoiser_width: int = 32
    latent_channels: int = 4
    temb_dim: int = 64
    deform_points: int = 4
    semantic_dim: int = 128
    feature_stages: int = 5


@dataclass
class SynthConfig:
    img_h: int = 64
    img_w: int = 64
    n_theta: int = 64
    n_phi: int = 32
    count: int = 64
    seed: int = 7
    max_distractors: int = 3
    shadows: bool = True


@dataclass
class StageConfig:
    epochs: int
    lr: float
    batch_size: int


@dataclass
class TrainConfig:
    seed: int = 0
    lambda_refine: float = 0.01
    kl_weight: float = 1e-6
    adv_weight: float = 0.5
    adv_warmup: int = 1000
    grad_clip: float = 1.0
    stage1: StageConfig = field(default_factory=lambda: StageConfig(40, 1.8e-3, 2))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(100, 1.6e-3, 2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(40, 4e-4, 2))
    stage4: StageConfig = field(default_factory=lambda: StageConfig(160, 4e-4, 2))
    stage5: StageConfig = field(default_factory=lambda: StageConfig(60, 8e-4, 1))

    def stage(self, k: int) -> StageConfig:
        if k not in (1, 2, 3, 4, 5):
            raise ConfigError(f"stage must be 1..5, got {k}")
        return getattr(self, f"stage{k}")


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _from_dict(cls, d, path, base=None):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected object, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    if base is None and not any(
            f.default is dataclasses.MISSING and
            f.default_factory is dataclasses.MISSING for f in names.values()):
        base = cls()
    kwargs = {}
    for name, f in names.items():
        if name not in d:
            # partial objects fall back to the enclosing default's values
            if base is not None:
                kwargs[name] = getattr(base, name)
            continue
        v = d[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type.endswith("Config")):
            typ = _resolve(f.type)
            kwargs[name] = _from_dict(typ, v, sub,
                                      getattr(base, name) if base is not None else None)
        else:
            typ = _resolve(f.type)
            if typ is bool:
                if not isinstance(v, bool):
                    raise ConfigError(f"{sub}: expected bool, got {v!r}")
                kwargs[name] = v
            elif typ is int:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{sub}: expected int, got {v!r}")
                kwargs[name] = v
            elif typ is float:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{sub}: expected number, got {v!r}")
                kwargs[name] = float(v)
            else:
                kwargs[name] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


_TYPES = {c.__name__: c for c in
          (ScheduleConfig, ModelConfig, SynthConfig, StageConfig, TrainConfig, RunConfig)}


def _resolve(t):
    if isinstance(t, str):
        return _TYPES.get(t, {"int": int, "float": float, "str": str, "bool": bool}.get(t, str))
    return t


def load_config(path=None, overrides=()):
    """Build a RunConfig from an optional JSON file plus dotted overrides."""
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        key, _, val = ov.partition("=")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not an object")
        node[parts[-1]] = parsed
    return _from_dict(RunConfig, raw, "")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_sha256(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def default_calibration(synth: SynthConfig | None = None) -> Calibration:
    """Sensor rig used by the synthetic scenes.

    LiDAR frame: +y forward, +z up. Camera sits 5 cm right and 10 cm above
    the LiDAR, looking forward (+z_cam = +y_lidar, +y_cam = -z_lidar).
    """
    s = synth or SynthConfig()
    half = math.atan(0.5)
    r_cr = np.array([[1.0, 0.0, 0.0],
                     [0.0, 0.0, -1.0],
                     [0.0, 1.0, 0.0]])
    c_pos = np.array([0.05, 0.0, 0.10])
    t_cr = -r_cr @ c_pos
    return Calibration(
        img_h=s.img_h, img_w=s.img_w,
        fx=float(s.img_w), fy=float(s.img_w),
        cx=s.img_w / 2.0, cy=s.img_h / 2.0,
        r_cr=r_cr, t_cr=t_cr,
        n_theta=s.n_theta, n_phi=s.n_phi,
        theta_min=-half, theta_max=half, phi_min=-half, phi_max=half,
        max_range=40.0)
