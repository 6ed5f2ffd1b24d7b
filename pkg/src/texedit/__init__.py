"""Mask-localized latent diffusion editing for fashion images."""

__version__ = "0.1.0"

from .codec import CodecParams, decode, downsample_mask, encode
from .diffusion import GuidanceConfig, NoiseSchedule, cfg_combine, ddim_sample, forward_noise
from .pipeline import EditPipeline, composite
from .unet import ConditionBundle, DenoisingUNet, UNetConfig

__all__ = [
    "CodecParams",
    "ConditionBundle",
    "DenoisingUNet",
    "EditPipeline",
    "GuidanceConfig",
    "NoiseSchedule",
    "UNetConfig",
    "cfg_combine",
    "composite",
    "ddim_sample",
    "decode",
    "downsample_mask",
    "encode",
    "forward_noise",
]
