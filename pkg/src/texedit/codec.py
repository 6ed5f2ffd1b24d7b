"""Pixel <-> latent codec.

The default codec is a deterministic orthonormal projection: each f x f x 3
pixel cell is flattened (space-to-depth) and mapped through a fixed seeded
matrix with orthonormal rows down to 4 latent channels.  Decoding applies
the transpose and re-expands.  This keeps the latent algebra exact and
testable; a small learned convolutional autoencoder is available as an
alternative codec kind for end-to-end experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .errors import ShapeError

LATENT_CHANNELS = 4  # fixed so the concatenated denoiser input has 13 channels


@dataclass
class CodecParams:
    kind: str = "projection"  # "projection" | "learned"
    downsample_factor: int = 4
    projection_seed: int = 0
    weights: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("projection", "learned"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.downsample_factor not in (4, 8):
            raise ValueError(f"downsample_factor must be 4 or 8, got {self.downsample_factor}")
        if self.kind == "learned" and self.weights is None:
            raise ValueError("learned codec requires weights")


@lru_cache(maxsize=8)
def _projection_matrix(seed: int, factor: int) -> torch.Tensor:
    """[4, 3*f*f] matrix with orthonormal rows.

    Rows 1-3 are the per-channel cell-mean directions, so every cell's mean
    color round-trips exactly through encode/decode (a fully random rank-4
    subspace keeps under 10% of a solid color's energy, which no generator
    could recover downstream).  Row 4 is a seeded random direction in the
    orthogonal complement and carries within-cell texture detail.
    """
    dim = 3 * factor * factor
    rows = np.zeros((LATENT_CHANNELS, dim))
    # cell layout after space-to-depth: index = (dr * f + dc) * 3 + channel
    for ch in range(3):
        rows[ch, ch::3] = 1.0 / factor
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal(dim)
    for ch in range(3):
        extra -= (extra @ rows[ch]) * rows[ch]
    rows[3] = extra / np.linalg.norm(extra)
    return torch.from_numpy(rows).to(torch.float32)


def _space_to_depth(img: torch.Tensor, f: int) -> torch.Tensor:
    h, w = img.shape[0] // f, img.shape[1] // f
    cells = img.reshape(h, f, w, f, 3).permute(0, 2, 1, 3, 4)
    return cells.reshape(h, w, f * f * 3)


def _depth_to_space(cells: torch.Tensor, f: int) -> torch.Tensor:
    h, w = cells.shape[0], cells.shape[1]
    img = cells.reshape(h, w, f, f, 3).permute(0, 2, 1, 3, 4)
    return img.reshape(h * f, w * f, 3)


def encode(image: torch.Tensor, params: CodecParams) -> torch.Tensor:
    """Encode a [H, W, 3] image to a [H/f, W/f, 4] latent."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected [H, W, 3] image, got {tuple(image.shape)}")
    f = params.downsample_factor
    if image.shape[0] % f or image.shape[1] % f:
        raise ShapeError(
            f"image dims {tuple(image.shape[:2])} not divisible by downsample factor {f}"
        )
    if params.kind == "projection":
        proj = _projection_matrix(params.projection_seed, f)
        return _space_to_depth(image, f) @ proj.T
    ae = _learned_module(params)
    with torch.no_grad():
        z = ae.encoder(image.permute(2, 0, 1).unsqueeze(0))
    return z.squeeze(0).permute(1, 2, 0)


def decode(latent: torch.Tensor, params: CodecParams) -> torch.Tensor:
    """Decode a [h, w, 4] latent back to a [-1, 1]-clamped [H, W, 3] image."""
    if latent.ndim != 3 or latent.shape[-1] != LATENT_CHANNELS:
        raise ShapeError(f"expected [h, w, {LATENT_CHANNELS}] latent, got {tuple(latent.shape)}")
    f = params.downsample_factor
    if params.kind == "projection":
        proj = _projection_matrix(params.projection_seed, f)
        return _depth_to_space(latent @ proj, f).clamp(-1.0, 1.0)
    ae = _learned_module(params)
    with torch.no_grad():
        x = ae.decoder(latent.permute(2, 0, 1).unsqueeze(0))
    return x.squeeze(0).permute(1, 2, 0).clamp(-1.0, 1.0)


def downsample_mask(mask: torch.Tensor, f: int) -> torch.Tensor:
    """Area-average pool a [H, W] mask to [H/f, W/f, 1]; values stay in [0, 1]."""
    if mask.ndim != 2:
        raise ShapeError(f"expected [H, W] mask, got {tuple(mask.shape)}")
    if mask.shape[0] % f or mask.shape[1] % f:
        raise ShapeError(f"mask dims {tuple(mask.shape)} not divisible by {f}")
    h, w = mask.shape[0] // f, mask.shape[1] // f
    pooled = mask.reshape(h, f, w, f).mean(dim=(1, 3))
    return pooled.unsqueeze(-1)


class ConvAutoencoder(nn.Module):
    """Small strided conv autoencoder used by the learned codec kind."""

    def __init__(self, factor: int = 4, hidden: int = 32):
        super().__init__()
        n_down = {4: 2, 8: 3}[factor]
        enc: list[nn.Module] = []
        c = 3
        for _ in range(n_down):
            enc += [nn.Conv2d(c, hidden, 4, stride=2, padding=1), nn.SiLU()]
            c = hidden
        enc.append(nn.Conv2d(c, LATENT_CHANNELS, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = [nn.Conv2d(LATENT_CHANNELS, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(n_down - 1):
            dec += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        dec.append(nn.ConvTranspose2d(hidden, 3, 4, stride=2, padding=1))
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def _learned_module(params: CodecParams) -> ConvAutoencoder:
    ae = ConvAutoencoder(params.downsample_factor)
    ae.load_state_dict({k: torch.as_tensor(v) for k, v in params.weights.items()})
    ae.eval()
    return ae


def train_learned_codec(
    images: list[torch.Tensor],
    factor: int = 4,
    steps: int = 200,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> tuple[CodecParams, float]:
    """Fit the conv autoencoder on a list of images.

    Returns the learned CodecParams and the final reconstruction MSE
    (reported for inspection, never asserted by the pipeline).
    """
    torch.manual_seed(seed)
    ae = ConvAutoencoder(factor)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    data = torch.stack([img.permute(2, 0, 1) for img in images])
    gen = torch.Generator().manual_seed(seed)
    mse = float("nan")
    for _ in range(steps):
        idx = torch.randint(0, len(images), (min(batch_size, len(images)),), generator=gen)
        batch = data[idx]
        recon = ae(batch)
        loss = torch.mean((recon - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        mse = loss.item()
    weights = {k: v.detach().clone() for k, v in ae.state_dict().items()}
    params = CodecParams(kind="learned", downsample_factor=factor, weights=weights)
    return params, mse
