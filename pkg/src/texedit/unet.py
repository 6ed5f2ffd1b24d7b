"""The denoising U-Net over 13-channel latent inputs.

Input channels are the fixed concatenation [noisy latent (4), editing mask
(1), pose latent (4), masked-image latent (4)]; that order is versioned and
enforced at checkpoint load.  Attention-bearing levels run fused
self-attention (keys/values extended by detail tokens from the frozen
auxiliary copy of this network) followed by decoupled text/texture
cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .attention import AttentionWeights, decoupled_cross_attention, fused_self_attention
from .conditioning import null_text_tokens, null_texture_tokens
from .errors import ShapeError

CHANNEL_ORDER = ("noisy_latent", "mask", "pose", "masked_image")
CHANNEL_ORDER_VERSION = "z4+m1+p4+e4:v1"
IN_CHANNELS = 13
OUT_CHANNELS = 4


@dataclass
class UNetConfig:
    base_channels: int = 32
    level_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (2, 3)
    cond_dim: int = 32
    n_heads: int = 4
    head_dim: int = 16
    in_channels: int = IN_CHANNELS
    out_channels: int = OUT_CHANNELS

    def __post_init__(self):
        if self.in_channels != IN_CHANNELS:
            raise ValueError(f"in_channels is fixed at {IN_CHANNELS}")
        if self.out_channels != OUT_CHANNELS:
            raise ValueError(f"out_channels is fixed at {OUT_CHANNELS}")
        levels = set(range(1, len(self.level_multipliers) + 1))
        if not set(self.attention_levels) <= levels:
            raise ValueError(
                f"attention_levels {self.attention_levels} outside valid levels {sorted(levels)}"
            )

    @property
    def attn_dim(self) -> int:
        return self.n_heads * self.head_dim


@dataclass
class ConditionBundle:
    """Everything the noise predictor consumes besides the noisy latent."""

    text: torch.Tensor | None  # [Lt, cond_dim]
    texture: torch.Tensor | None  # [Li, cond_dim]
    mask_latent: torch.Tensor  # [h, w, 1]
    pose_latent: torch.Tensor  # [h, w, 4]
    masked_latent: torch.Tensor  # [h, w, 4]
    details: dict[int, torch.Tensor] = field(default_factory=dict)
    drop_text: bool = False
    drop_texture: bool = False
    lambda_texture: float = 1.0

    def unconditional(self) -> "ConditionBundle":
        """Null-condition variant for the classifier-free guidance branch."""
        return replace(self, drop_text=True, drop_texture=True, details={})

    def resolved_text(self, cond_dim: int) -> torch.Tensor:
        if self.drop_text or self.text is None:
            return null_text_tokens(cond_dim)
        return self.text

    def resolved_texture(self, cond_dim: int) -> torch.Tensor:
        if self.drop_texture or self.texture is None:
            return null_texture_tokens(cond_dim)
        return self.texture

    def resolved_details(self) -> dict[int, torch.Tensor]:
        return {} if self.drop_texture else self.details


def assemble_input(z_t: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
    """Concatenate [z_t, mask, pose, masked-image] along channels -> [h, w, 13]."""
    if z_t.ndim != 3 or z_t.shape[-1] != 4:
        raise ShapeError(f"expected [h, w, 4] noisy latent, got {tuple(z_t.shape)}")
    parts = (z_t, cond.mask_latent, cond.pose_latent, cond.masked_latent)
    spatial = z_t.shape[:2]
    for name, part in zip(CHANNEL_ORDER, parts):
        if part.shape[:2] != spatial:
            raise ShapeError(
                f"{name} spatial dims {tuple(part.shape[:2])} != latent dims {tuple(spatial)}"
            )
    return torch.cat(parts, dim=-1)


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(dtype)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def _proj(d_in: int, d_out: int) -> nn.Parameter:
    w = torch.empty(d_in, d_out)
    bound = 1.0 / math.sqrt(d_in)
    nn.init.uniform_(w, -bound, bound)
    return nn.Parameter(w)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.t_proj(torch.nn.functional.silu(t_emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(h))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Fused self-attention then decoupled cross-attention, both residual."""

    def __init__(self, channels: int, config: UNetConfig):
        super().__init__()
        d = config.attn_dim
        dc = config.cond_dim
        self.n_heads = config.n_heads
        self.norm_self = nn.LayerNorm(channels)
        self.sa_wq = _proj(channels, d)
        self.sa_wk = _proj(channels, d)
        self.sa_wv = _proj(channels, d)
        self.sa_out = _proj(d, channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.ca_wq = _proj(channels, d)
        self.ca_wk_text = _proj(dc, d)
        self.ca_wv_text = _proj(dc, d)
        self.ca_wk_img = _proj(dc, d)
        self.ca_wv_img = _proj(dc, d)
        self.ca_out = _proj(d, channels)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        texture: torch.Tensor | None,
        f_c: torch.Tensor | None,
        lam: float,
        capture: dict | None = None,
        capture_key: int | None = None,
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # [B, HW, C]
        hid = self.norm_self(tokens)
        if capture is not None:
            capture[capture_key] = hid
        sa = fused_self_attention(hid, f_c, self.sa_wq, self.sa_wk, self.sa_wv, self.n_heads)
        tokens = tokens + sa @ self.sa_out
        hid2 = self.norm_cross(tokens)
        weights = AttentionWeights(
            w_q=self.ca_wq,
            w_k=self.ca_wk_text,
            w_v=self.ca_wv_text,
            w_k_img=self.ca_wk_img,
            w_v_img=self.ca_wv_img,
        )
        ca = decoupled_cross_attention(hid2, text, texture, weights, lam, self.n_heads)
        tokens = tokens + ca @ self.ca_out
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class DenoisingUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        chans = [config.base_channels * m for m in config.level_multipliers]
        t_dim = 4 * config.base_channels
        self.t_dim = t_dim
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stem = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamplers = nn.ModuleList()
        c_prev = chans[0]
        for i, c in enumerate(chans):
            self.down_res.append(ResBlock(c_prev, c, t_dim))
            if (i + 1) in config.attention_levels:
                self.down_attn[str(i + 1)] = AttnBlock(c, config)
            if i < len(chans) - 1:
                self.downsamplers.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            c_prev = c

        self.mid = ResBlock(chans[-1], chans[-1], t_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsamplers = nn.ModuleList()
        c_prev = chans[-1]
        for i in reversed(range(len(chans))):
            self.up_res.append(ResBlock(c_prev + chans[i], chans[i], t_dim))
            if (i + 1) in config.attention_levels:
                self.up_attn[str(i + 1)] = AttnBlock(chans[i], config)
            if i > 0:
                self.upsamplers.append(nn.Conv2d(chans[i], chans[i], 3, padding=1))
            c_prev = chans[i]

        self.out_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], config.out_channels, 3, padding=1)

    def fused_attention_parameters(self) -> dict[str, nn.Parameter]:
        """The stage-2 trainable set: every fused self-attention q/k/v projection."""
        out = {}
        for name, p in self.named_parameters():
            if name.endswith((".sa_wq", ".sa_wk", ".sa_wv")):
                out[name] = p
        return out

    def _check(self, x: torch.Tensor, where: str) -> None:
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite activations at {where}")

    def _down(
        self,
        x: torch.Tensor,
        t_emb: torch.Tensor,
        text: torch.Tensor,
        texture: torch.Tensor | None,
        details: dict[int, torch.Tensor],
        lam: float,
        capture: dict | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for i, res in enumerate(self.down_res):
            level = i + 1
            x = res(x, t_emb)
            key = str(level)
            if key in self.down_attn:
                x = self.down_attn[key](
                    x, text, texture, details.get(level), lam, capture, level
                )
            self._check(x, f"down level {level}")
            skips.append(x)
            if i < len(self.downsamplers):
                x = self.downsamplers[i](x)
        return x, skips

    def forward(
        self,
        z13: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        texture: torch.Tensor | None = None,
        details: dict[int, torch.Tensor] | None = None,
        lam: float = 1.0,
    ) -> torch.Tensor:
        """[B, 13, h, w] noisy stack + conditions -> [B, 4, h, w] noise estimate."""
        if z13.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {z13.shape[1]}")
        details = details or {}
        t_emb = self.t_mlp(sinusoidal_embedding(t, self.t_dim, self.stem.weight.dtype))
        x = self.stem(z13)
        x, skips = self._down(x, t_emb, text, texture, details, lam)
        x = self.mid(x, t_emb)
        self._check(x, "mid")
        n_levels = len(self.down_res)
        for j, res in enumerate(self.up_res):
            level = n_levels - j
            x = torch.cat([x, skips[level - 1]], dim=1)
            x = res(x, t_emb)
            key = str(level)
            if key in self.up_attn:
                x = self.up_attn[key](x, text, texture, details.get(level), lam)
            self._check(x, f"up level {level}")
            if level > 1:
                x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
                x = self.upsamplers[j](x)
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(x)))
        self._check(out, "output")
        return out

    def detail_tokens(self, texture_latent: torch.Tensor) -> dict[int, torch.Tensor]:
        """Encoder-only pass over a clean texture latent at the t=0 embedding.

        The 4-channel latent is padded with zero mask/pose/masked-image
        channels; captured tokens are the normalized hidden states entering
        each downsampling self-attention block.
        """
        if texture_latent.ndim != 3 or texture_latent.shape[-1] != 4:
            raise ShapeError(f"expected [h, w, 4] latent, got {tuple(texture_latent.shape)}")
        dtype = self.stem.weight.dtype
        h, w, _ = texture_latent.shape
        pad = torch.zeros(h, w, self.config.in_channels - 4, dtype=dtype)
        z13 = torch.cat([texture_latent.to(dtype), pad], dim=-1)
        x = z13.permute(2, 0, 1).unsqueeze(0)
        t_emb = self.t_mlp(sinusoidal_embedding(torch.zeros(1), self.t_dim, dtype))
        null_text = null_text_tokens(self.config.cond_dim).to(dtype).unsqueeze(0)
        capture: dict[int, torch.Tensor] = {}
        self._down(self.stem(x), t_emb, null_text, None, {}, 0.0, capture)
        return {level: tokens.squeeze(0) for level, tokens in capture.items()}


def init_params(config: UNetConfig, seed: int) -> DenoisingUNet:
    """Seeded construction with the extra 9 input-channel weights zeroed.

    Zeroing first-conv columns 5..13 makes the initial prediction independent
    of the mask/pose/masked-image channels.
    """
    torch.manual_seed(seed)
    model = DenoisingUNet(config)
    with torch.no_grad():
        model.stem.weight[:, 4:, :, :] = 0.0
    return model


def predict_noise(
    z_t: torch.Tensor, t: int, cond: ConditionBundle, model: DenoisingUNet
) -> torch.Tensor:
    """Single-sample noise prediction: [h, w, 4] -> [h, w, 4]."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    z13 = assemble_input(z_t, cond).permute(2, 0, 1).unsqueeze(0)
    text = cond.resolved_text(model.config.cond_dim).unsqueeze(0)
    texture = cond.resolved_texture(model.config.cond_dim).unsqueeze(0)
    details = {k: v.unsqueeze(0) for k, v in cond.resolved_details().items()}
    out = model(
        z13,
        torch.tensor([t]),
        text,
        texture,
        details,
        cond.lambda_texture,
    )
    return out.squeeze(0).permute(1, 2, 0)
