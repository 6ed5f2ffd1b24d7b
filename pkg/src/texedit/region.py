"""Editing-region masks: location backends, dilation, mask application.

The oracle backend serves the ground-truth mask attached to a synthetic
sample and never touches the network.  The external backend speaks the
two-step detect/segment HTTP protocol of a grounded-segmentation service.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import requests
import torch
from scipy import ndimage

from .errors import RegionNotFoundError, ShapeError, TransportError
from .images import image_to_b64, mask_from_b64


@dataclass
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int
    score: float = 1.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def validate_mask(mask: torch.Tensor) -> torch.Tensor:
    if mask.ndim != 2:
        raise ShapeError(f"expected [H, W] mask, got {tuple(mask.shape)}")
    uniq = torch.unique(mask)
    if not bool(torch.isin(uniq, torch.tensor([0.0, 1.0])).all()):
        raise ValueError("mask values must be exactly 0 or 1")
    return mask


def disk_offsets(radius: int) -> np.ndarray:
    """Boolean disk footprint: offsets with dx^2 + dy^2 <= r^2."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def dilate(mask: torch.Tensor, radius: int) -> torch.Tensor:
    """Morphological dilation with a disk structuring element; radius 0 is identity."""
    validate_mask(mask)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.clone()
    grown = ndimage.binary_dilation(mask.numpy() > 0.5, structure=disk_offsets(radius))
    return torch.from_numpy(grown.astype(np.float32))


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """(1 - M) * image: masked region zeroed (mid-gray in [-1, 1] space)."""
    if image.shape[:2] != mask.shape:
        raise ShapeError(
            f"image dims {tuple(image.shape[:2])} != mask dims {tuple(mask.shape)}"
        )
    return image * (1.0 - mask).unsqueeze(-1)


def mask_bbox(mask: torch.Tensor) -> BoundingBox:
    ys, xs = torch.nonzero(mask > 0.5, as_tuple=True)
    if len(ys) == 0:
        raise ValueError("empty mask has no bounding box")
    return BoundingBox(
        x0=int(xs.min()), y0=int(ys.min()), x1=int(xs.max()) + 1, y1=int(ys.max()) + 1
    )


class OracleMaskBackend:
    """Serves a known ground-truth mask; no network involved."""

    def __init__(self, mask: torch.Tensor):
        self.mask = validate_mask(mask)

    def locate(self, image: torch.Tensor, garment_name: str) -> torch.Tensor:
        if self.mask.shape != image.shape[:2]:
            raise ShapeError(
                f"oracle mask dims {tuple(self.mask.shape)} != image dims {tuple(image.shape[:2])}"
            )
        return self.mask.clone()


class ExternalMaskBackend:
    """Two-step detect/segment client for a grounded segmentation service."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 20.0,
        score_threshold: float = 0.3,
        retries: int = 1,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.score_threshold = score_threshold
        self.retries = retries

    def _post(self, route: str, payload: dict) -> dict:
        url = f"{self.base_url}{route}"
        last_err: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(url, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as err:
                last_err = err
        raise TransportError(f"segmentation backend {url} failed: {last_err}")

    def locate(self, image: torch.Tensor, garment_name: str) -> torch.Tensor:
        b64 = image_to_b64(image)
        detection = self._post("/detect", {"image": b64, "prompt": garment_name})
        boxes = [
            BoundingBox(**b)
            for b in detection.get("boxes", [])
            if b.get("score", 0.0) >= self.score_threshold
        ]
        if not boxes:
            raise RegionNotFoundError(garment_name)
        best = max(boxes, key=lambda b: b.score)
        seg = self._post(
            "/segment",
            {
                "image": b64,
                "box": {"x0": best.x0, "y0": best.y0, "x1": best.x1, "y1": best.y1},
            },
        )
        if "mask" not in seg:
            raise TransportError(f"segment response from {self.base_url} missing 'mask'")
        mask = mask_from_b64(seg["mask"])
        if mask.shape != image.shape[:2]:
            raise TransportError(
                f"backend mask dims {tuple(mask.shape)} != image dims {tuple(image.shape[:2])}"
            )
        return mask


def locate(
    image: torch.Tensor,
    garment_name: str,
    backend,
    dilation_radius: int = 3,
) -> torch.Tensor:
    """Obtain the editing mask from a backend, then dilate for smoother edges."""
    mask = backend.locate(image, garment_name)
    return dilate(validate_mask(mask), dilation_radius)
