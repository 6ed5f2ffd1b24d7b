"""PNG image IO and pixel conversions.

Images travel through the pipeline as float32 torch tensors of shape
[H, W, 3] with values in [-1, 1]; binary masks as float32 [H, W] tensors
with values in {0, 1}.  Files are 8-bit RGB (or grayscale for masks) PNG,
mapped linearly via v/127.5 - 1.
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """uint8 [H, W, 3] -> float32 tensor in [-1, 1]."""
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """float [-1, 1] image tensor -> uint8 array, clamped."""
    arr = (img.detach().clamp(-1.0, 1.0) + 1.0) * 127.5
    return arr.round().to(torch.uint8).numpy()


def load_image(path: str | Path) -> torch.Tensor:
    pil = Image.open(path).convert("RGB")
    return from_uint8(np.asarray(pil))


def save_image(img: torch.Tensor, path: str | Path) -> None:
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected [H, W, 3] image, got {tuple(img.shape)}")
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_mask(path: str | Path) -> torch.Tensor:
    """Load a mask PNG (any mode) as a binary float32 [H, W] tensor."""
    pil = Image.open(path).convert("L")
    arr = np.asarray(pil)
    return torch.from_numpy((arr >= 128).astype(np.float32))


def save_mask(mask: torch.Tensor, path: str | Path) -> None:
    if mask.ndim != 2:
        raise ShapeError(f"expected [H, W] mask, got {tuple(mask.shape)}")
    arr = (mask.detach().numpy() >= 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def image_to_b64(img: torch.Tensor) -> str:
    """Encode an image tensor as a base64 PNG string (wire format)."""
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_from_b64(data: str) -> torch.Tensor:
    buf = io.BytesIO(base64.b64decode(data))
    return from_uint8(np.asarray(Image.open(buf).convert("RGB")))


def mask_to_b64(mask: torch.Tensor) -> str:
    buf = io.BytesIO()
    arr = (mask.detach().numpy() >= 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").convert("1").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def mask_from_b64(data: str) -> torch.Tensor:
    buf = io.BytesIO(base64.b64decode(data))
    arr = np.asarray(Image.open(buf).convert("L"))
    return torch.from_numpy((arr >= 128).astype(np.float32))


def resize_image(img: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinear resize of a [H, W, 3] image to side x side."""
    if img.shape[0] == side and img.shape[1] == side:
        return img
    chw = img.permute(2, 0, 1).unsqueeze(0)
    out = torch.nn.functional.interpolate(
        chw, size=(side, side), mode="bilinear", align_corners=False, antialias=False
    )
    return out.squeeze(0).permute(1, 2, 0).clamp(-1.0, 1.0)
