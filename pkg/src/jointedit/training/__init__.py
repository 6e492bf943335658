from .augment import augment_image, augment_range
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam, clip_grad_norm
from .stages import (ModelBundle, StagePlan, StageRunner, denormalize_range,
                     mask_to_latent, normalize_range, stage_plan)

__all__ = [
    "Adam", "clip_grad_norm", "save_checkpoint", "load_checkpoint",
    "augment_image", "augment_range", "ModelBundle", "StagePlan",
    "StageRunner", "stage_plan", "normalize_range", "denormalize_range",
    "mask_to_latent",
]
