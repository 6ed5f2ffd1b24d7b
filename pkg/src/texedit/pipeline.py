"""End-to-end editing pipeline assembled from a checkpoint."""

from __future__ import annotations

from pathlib import Path

import torch

from .checkpoint import Checkpoint, load_checkpoint
from .codec import decode, downsample_mask, encode
from .conditioning import (
    CANONICAL_PATCH_SIDE,
    HashedTextEmbedder,
    LearnedTextureEncoder,
    StubTextureEmbedder,
    extract_detail_features,
)
from .diffusion import GuidanceConfig, NoiseSchedule, ddim_sample
from .images import resize_image
from .region import apply_mask, validate_mask
from .unet import ConditionBundle, predict_noise


def composite(original: torch.Tensor, generated: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """x_g = (1 - M) * x0 + M * x'; bit-exact outside the mask."""
    if original.shape != generated.shape or original.shape[:2] != mask.shape:
        raise ValueError("composite inputs must share spatial dims")
    validate_mask(mask)
    return torch.where(mask.bool().unsqueeze(-1), generated, original)


class EditPipeline:
    """Checkpointed model plus codec/schedule, exposing single-image editing."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.model = ckpt.build_unet()
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.codec = ckpt.codec
        self.schedule = NoiseSchedule.cosine(ckpt.meta.get("schedule", {}).get("T", 50))
        cond_dim = self.model.config.cond_dim
        self.text_embedder = HashedTextEmbedder(cond_dim)
        if ckpt.meta.get("texture_backend", "learned") == "learned" and ckpt.texture_encoder_state:
            enc = LearnedTextureEncoder(cond_dim)
            enc.load_state_dict(ckpt.texture_encoder_state)
            enc.eval()
            self.texture_encoder = enc
        else:
            self.texture_encoder = StubTextureEmbedder(cond_dim)
        self.dp_unet = ckpt.build_dp_unet()

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "EditPipeline":
        return cls(load_checkpoint(path))

    def build_conditions(
        self,
        person: torch.Tensor,
        mask: torch.Tensor,
        caption: str,
        patch: torch.Tensor,
        lam: float,
    ) -> ConditionBundle:
        masked = apply_mask(person, mask)
        patch = resize_image(patch, CANONICAL_PATCH_SIDE)
        details = {}
        if self.dp_unet is not None:
            details = extract_detail_features(encode(patch, self.codec), self.dp_unet)
        return ConditionBundle(
            text=self.text_embedder.embed(caption),
            texture=self.texture_encoder.embed(patch),
            mask_latent=downsample_mask(mask, self.codec.downsample_factor),
            pose_latent=None,  # filled by the caller
            masked_latent=encode(masked, self.codec),
            details=details,
            lambda_texture=lam,
        )

    def edit(
        self,
        person: torch.Tensor,
        pose: torch.Tensor,
        mask: torch.Tensor,
        caption: str,
        patch: torch.Tensor,
        cfg: GuidanceConfig,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the sampler on one image; returns (generated x', composite x_g)."""
        cond = self.build_conditions(person, mask, caption, patch, cfg.lambda_texture)
        cond.pose_latent = encode(pose, self.codec)
        h, w = cond.mask_latent.shape[:2]
        gen = torch.Generator().manual_seed(cfg.seed)
        init = torch.randn(h, w, 4, generator=gen)

        def model_fn(z, t, c):
            with torch.no_grad():
                return predict_noise(z, t, c, self.model)

        z0 = ddim_sample(model_fn, init, cond, cfg, self.schedule)
        generated = decode(z0, self.codec)
        return generated, composite(person, generated, mask)
