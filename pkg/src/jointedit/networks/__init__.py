from .layers import Module, Linear, Conv2d, GroupNorm, ResBlock, TokenInjection
from .vae import (ImageVAE, RangeVAE, PatchDiscriminator, hinge_d_loss,
                  hinge_g_loss)
from .conditioning import (SemanticEncoder, SemanticHead, FeatureExtractor,
                           DeformableCrossAttention, CrossModalityExchange,
                           ExchangeMaps)
from .denoiser import Denoiser, JointDenoiser

__all__ = [
    "Module", "Linear", "Conv2d", "GroupNorm", "ResBlock", "TokenInjection",
    "ImageVAE", "RangeVAE", "PatchDiscriminator", "hinge_d_loss",
    "hinge_g_loss", "SemanticEncoder", "SemanticHead", "FeatureExtractor",
    "DeformableCrossAttention", "CrossModalityExchange", "ExchangeMaps",
    "Denoiser", "JointDenoiser",
]
