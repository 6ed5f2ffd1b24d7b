"""Text and texture embedders plus detail-feature extraction.

Embedders come in three flavors: deterministic offline stubs (hashed
bag-of-words text, seeded patchwise-linear texture), a small trainable
convolutional texture encoder for end-to-end runs, and HTTP clients for
external embedding services.  All produce token sequences [L, d_cond].
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np
import requests
import torch
from torch import nn

from .errors import ShapeError, TransportError
from .images import image_to_b64, resize_image

TEXT_TOKENS = 8
TEXTURE_TOKENS = 16
CANONICAL_PATCH_SIDE = 32
ALLOWED_PATCH_SIDES = (16, 32, 64, 128)


def null_text_tokens(dim: int) -> torch.Tensor:
    """Sentinel for the dropped-text condition: the empty-caption embedding."""
    return torch.zeros(TEXT_TOKENS, dim)


def null_texture_tokens(dim: int) -> torch.Tensor:
    """Sentinel for the dropped-texture condition: an all-zero token sequence."""
    return torch.zeros(TEXTURE_TOKENS, dim)


@lru_cache(maxsize=4096)
def _word_vector(word: str, dim: int) -> tuple[float, ...]:
    seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return tuple((rng.standard_normal(dim) / np.sqrt(dim)).tolist())


class HashedTextEmbedder:
    """Deterministic bag-of-words stub: word hash -> seeded vector -> slot sum.

    The empty caption embeds to the all-zero sentinel used by the
    unconditional guidance branch.
    """

    backend_id = "hashtext/v1"

    def __init__(self, dim: int):
        self.dim = dim

    def embed(self, caption: str) -> torch.Tensor:
        tokens = np.zeros((TEXT_TOKENS, self.dim), dtype=np.float64)
        for i, word in enumerate(caption.lower().split()):
            tokens[i % TEXT_TOKENS] += np.asarray(_word_vector(word, self.dim))
        return torch.from_numpy(tokens).to(torch.float32)


def _validate_patch(patch: torch.Tensor) -> None:
    if patch.ndim != 3 or patch.shape[-1] != 3:
        raise ShapeError(f"expected [S, S, 3] patch, got {tuple(patch.shape)}")
    if patch.shape[0] != patch.shape[1]:
        raise ShapeError(f"patch must be square, got {tuple(patch.shape[:2])}")
    if patch.shape[0] not in ALLOWED_PATCH_SIDES:
        raise ShapeError(
            f"patch side {patch.shape[0]} not in allowed sides {ALLOWED_PATCH_SIDES}"
        )


class StubTextureEmbedder:
    """Seeded patchwise-linear texture features: 4x4 cell grid -> 16 tokens.

    Purely linear with no bias, so a zero patch maps to zero tokens.
    """

    def __init__(self, dim: int, seed: int = 7):
        self.dim = dim
        self.seed = seed
        self.backend_id = f"stubtexture/v1/seed{seed}"
        cell = CANONICAL_PATCH_SIDE // 4
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((cell * cell * 3, dim)) / np.sqrt(cell * cell * 3)
        self._weight = torch.from_numpy(w).to(torch.float32)

    def embed(self, patch: torch.Tensor) -> torch.Tensor:
        _validate_patch(patch)
        patch = resize_image(patch, CANONICAL_PATCH_SIDE)
        cell = CANONICAL_PATCH_SIDE // 4
        cells = patch.reshape(4, cell, 4, cell, 3).permute(0, 2, 1, 3, 4)
        flat = cells.reshape(TEXTURE_TOKENS, cell * cell * 3)
        return flat @ self._weight


class LearnedTextureEncoder(nn.Module):
    """Texture patch -> 16 conditioning tokens.

    A learnable patchwise-linear stem (one 8x8 cell per token) carries color
    directly from the first step; a small conv stack adds pattern detail on
    top.  The linear path is what keeps color conditioning robust on unseen
    textures at desk scale.
    """

    backend_id = "learnedtexture/v2"

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        cell = CANONICAL_PATCH_SIDE // 4
        self.cell = cell
        self.color_stem = nn.Linear(cell * cell * 3, dim)
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, dim, 3, stride=2, padding=1),
        )

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """[B, 3, 32, 32] -> [B, 16, dim] token sequences."""
        b = patches.shape[0]
        conv_tokens = self.net(patches).flatten(2).transpose(1, 2)  # [B, 16, dim]
        cells = patches.reshape(b, 3, 4, self.cell, 4, self.cell)
        cells = cells.permute(0, 2, 4, 1, 3, 5).reshape(b, TEXTURE_TOKENS, -1)
        return self.color_stem(cells) + conv_tokens

    def embed(self, patch: torch.Tensor) -> torch.Tensor:
        _validate_patch(patch)
        patch = resize_image(patch, CANONICAL_PATCH_SIDE)
        with torch.no_grad():
            return self.forward(patch.permute(2, 0, 1).unsqueeze(0)).squeeze(0)


def _post_json(url: str, payload: dict, timeout: float, retries: int) -> dict:
    last_err: Exception | None = None
    for _ in range(retries + 1):
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as err:
            last_err = err
    raise TransportError(f"backend {url} failed after {retries + 1} attempts: {last_err}")


def _tokens_from_response(data: dict, url: str) -> torch.Tensor:
    if "tokens" not in data:
        raise TransportError(f"backend {url} response missing 'tokens'")
    tokens = torch.tensor(data["tokens"], dtype=torch.float32)
    if tokens.ndim != 2:
        raise TransportError(f"backend {url} returned malformed token matrix")
    return tokens


class ExternalTextEmbedder:
    """HTTP client for a text embedding endpoint: {caption} -> {tokens}."""

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backend_id = f"exttext:{url}"

    def embed(self, caption: str) -> torch.Tensor:
        data = _post_json(self.url, {"caption": caption}, self.timeout, self.retries)
        return _tokens_from_response(data, self.url)


class ExternalTextureEmbedder:
    """HTTP client for an image embedding endpoint: {image: b64 PNG} -> {tokens}."""

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backend_id = f"exttexture:{url}"

    def embed(self, patch: torch.Tensor) -> torch.Tensor:
        _validate_patch(patch)
        data = _post_json(self.url, {"image": image_to_b64(patch)}, self.timeout, self.retries)
        return _tokens_from_response(data, self.url)


def extract_detail_features(
    texture_latent: torch.Tensor, dp_unet
) -> dict[int, torch.Tensor]:
    """Run the frozen auxiliary U-Net encoder once over a clean texture latent.

    Returns per-level token sequences captured just before each
    self-attention block on the downsampling path.  The producer runs at the
    t=0 embedding with no gradient; features are detached.
    """
    with torch.no_grad():
        feats = dp_unet.detail_tokens(texture_latent)
    return {level: tokens.detach() for level, tokens in feats.items()}
