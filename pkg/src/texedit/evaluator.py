"""Evaluation harness: compositing plus the four quality metrics.

Metric backbones are pluggable; the offline defaults are a seeded random
convolutional filter bank (image features, d=64) and the hashed text
embedder.  Absolute metric values are only comparable within one backend id.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .conditioning import HashedTextEmbedder
from .dataset import load_manifest, load_sample
from .diffusion import GuidanceConfig
from .images import resize_image, save_image, to_uint8
from .pipeline import EditPipeline, composite
from .region import dilate, mask_bbox

CLIP_CROP_SIDE = 32  # 128 at the source dataset's native resolution


# ---------------------------------------------------------------------------
# feature backbones
# ---------------------------------------------------------------------------


class FilterBankBackbone:
    """Fixed seeded multi-scale conv filter bank; pooled features have d=64."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.backend_id = f"filterbank/v1/seed{seed}"
        gen = torch.Generator().manual_seed(seed)
        shapes = [(16, 3), (24, 16), (24, 24)]
        self.weights = [
            torch.randn(c_out, c_in, 3, 3, generator=gen) / np.sqrt(c_in * 9)
            for c_out, c_in in shapes
        ]

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img.permute(2, 0, 1).unsqueeze(0)
        feats = []
        with torch.no_grad():
            for w in self.weights:
                x = torch.nn.functional.conv2d(x, w, stride=2, padding=1)
                x = torch.nn.functional.relu(x)
                feats.append(x.squeeze(0))
        return feats

    def pooled(self, img: torch.Tensor) -> torch.Tensor:
        return torch.cat([f.mean(dim=(1, 2)) for f in self.features(img)])


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, backbone) -> float:
    """Unit-normalized feature differences, spatially averaged, layer-summed."""
    if a.shape != b.shape:
        raise ValueError("images must share dims")
    total = 0.0
    for fa, fb in zip(backbone.features(a), backbone.features(b)):
        na = fa / torch.sqrt((fa * fa).sum(dim=0, keepdim=True) + 1e-10)
        nb = fb / torch.sqrt((fb * fb).sum(dim=0, keepdim=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(dim=0).mean())
    return total


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, ridge: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The square-root trace is computed from the eigenvalues of the symmetrized
    product sqrt(S1) S2 sqrt(S1); a small ridge keeps both covariances PSD.
    """
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ValueError("need at least 2 samples per feature set")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ValueError("feature dims differ")
    d = feats_a.shape[1]
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False)) + ridge * np.eye(d)
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False)) + ridge * np.eye(d)

    w, v = np.linalg.eigh(cov_a)
    sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = sqrt_a @ cov_b @ sqrt_a
    w2 = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(w2, 0.0, None)).sum()

    fid = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


# ---------------------------------------------------------------------------
# joint text/image embedding backends for the CLIP-style scores
# ---------------------------------------------------------------------------


def cosine(u: torch.Tensor, v: torch.Tensor) -> float:
    nu, nv = float(u.norm()), float(v.norm())
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / (nu * nv)


class StubClipBackend:
    """Offline joint embedder: filter-bank image features + hashed text."""

    def __init__(self, seed: int = 0):
        self.bank = FilterBankBackbone(seed)
        self.text = HashedTextEmbedder(64)
        self.backend_id = f"stubclip/v1/seed{seed}"

    def embed_image(self, img: torch.Tensor) -> torch.Tensor:
        return self.bank.pooled(resize_image(img, CLIP_CROP_SIDE))

    def embed_caption(self, caption: str) -> torch.Tensor:
        return self.text.embed(caption).mean(dim=0)


class EncoderClipBackend:
    """Joint embedder backed by a trained texture encoder (image side)."""

    def __init__(self, texture_encoder, tag: str = "ckpt"):
        self.encoder = texture_encoder
        self.text = HashedTextEmbedder(texture_encoder.dim)
        self.backend_id = f"encoderclip/v1/{tag}"

    def embed_image(self, img: torch.Tensor) -> torch.Tensor:
        return self.encoder.embed(resize_image(img, CLIP_CROP_SIDE)).mean(dim=0)

    def embed_caption(self, caption: str) -> torch.Tensor:
        return self.text.embed(caption).mean(dim=0)


# ---------------------------------------------------------------------------
# per-edit scoring
# ---------------------------------------------------------------------------


@dataclass
class EditResult:
    original: torch.Tensor
    generated: torch.Tensor
    composite: torch.Tensor
    mask: torch.Tensor
    caption: str
    texture_patch: torch.Tensor
    sample_id: str = ""


def _centered_crop(img: torch.Tensor, mask: torch.Tensor, side: int) -> torch.Tensor:
    """Square crop at the mask centroid, kept inside the mask bbox when possible."""
    bbox = mask_bbox(mask)
    ys, xs = torch.nonzero(mask > 0.5, as_tuple=True)
    cy, cx = float(ys.float().mean()), float(xs.float().mean())
    h, w = img.shape[:2]

    def _origin(center: float, lo: int, hi: int, size: int) -> int:
        o = int(round(center - side / 2))
        if hi - lo >= side:
            o = min(max(o, lo), hi - side)
        o = min(max(o, 0), size - side)
        return o

    r = _origin(cy, bbox.y0, bbox.y1, h)
    c = _origin(cx, bbox.x0, bbox.x1, w)
    return img[r : r + side, c : c + side]


def clip_scores(result: EditResult, embedder, crop_side: int = CLIP_CROP_SIDE) -> tuple[float, float]:
    """(caption vs masked-region, texture crop vs conditioning patch) cosines."""
    if not bool((result.mask > 0.5).any()):
        raise ValueError("no editing region: mask is empty")
    bbox = mask_bbox(result.mask)
    region = result.composite[bbox.y0 : bbox.y1, bbox.x0 : bbox.x1]
    clip_s = cosine(embedder.embed_caption(result.caption), embedder.embed_image(region))
    crop = _centered_crop(result.composite, result.mask, crop_side)
    clip_i = cosine(embedder.embed_image(crop), embedder.embed_image(result.texture_patch))
    return clip_s, clip_i


@dataclass
class MetricReport:
    fid: float
    lpips_like: float
    clip_s: float
    clip_i: float
    n_samples: int
    n_failed: int = 0
    backends: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "fid": self.fid,
            "lpips_like": self.lpips_like,
            "clip_s": self.clip_s,
            "clip_i": self.clip_i,
            "n_samples": self.n_samples,
            "n_failed": self.n_failed,
            "backends": self.backends,
        }
        return json.dumps(payload, indent=1, sort_keys=True)


def contact_sheet(results: list[EditResult], path: str | Path) -> None:
    """One row per sample: original, mask, texture, composite."""
    if not results:
        return
    cell = results[0].original.shape[0]
    cols = 4
    sheet = Image.new("RGB", (cols * cell, len(results) * cell), (0, 0, 0))
    for i, r in enumerate(results):
        mask_rgb = r.mask.unsqueeze(-1).repeat(1, 1, 3) * 2.0 - 1.0
        texture = resize_image(r.texture_patch, cell)
        for j, img in enumerate((r.original, mask_rgb, texture, r.composite)):
            sheet.paste(Image.fromarray(to_uint8(img), mode="RGB"), (j * cell, i * cell))
    sheet.save(path, format="PNG")


def evaluate_manifest(
    manifest_path: str | Path,
    checkpoint_path: str | Path | None,
    cfg: GuidanceConfig,
    out_dir: str | Path | None = None,
    clip_backend=None,
    feature_backbone: FilterBankBackbone | None = None,
    generate_fn=None,
    dilation_radius: int | None = None,
    max_failure_fraction: float = 0.1,
) -> MetricReport:
    """Run the edit pipeline over a manifest and aggregate the four metrics.

    `generate_fn(sample, mask, seed)` may replace the sampler (test double).
    Per-sample failures are logged and excluded; the report fails when more
    than `max_failure_fraction` of samples fail.
    """
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    if not manifest.records:
        raise ValueError("empty manifest")

    pipeline = None
    if generate_fn is None:
        pipeline = EditPipeline.from_checkpoint(checkpoint_path)
        radius = dilation_radius
        if radius is None:
            radius = pipeline.ckpt.meta.get("dilation_radius", 3)
    else:
        radius = 3 if dilation_radius is None else dilation_radius

    backbone = feature_backbone or FilterBankBackbone(seed=0)
    clip = clip_backend or StubClipBackend(seed=0)

    results: list[EditResult] = []
    failures: list[str] = []
    real_feats, gen_feats = [], []
    lpips_vals, clip_s_vals, clip_i_vals = [], [], []

    for i, record in enumerate(manifest.records):
        try:
            sample = load_sample(record, root)
            mask = dilate(sample.mask, radius)
            run_cfg = GuidanceConfig(
                guidance_scale=cfg.guidance_scale,
                lambda_texture=cfg.lambda_texture,
                ddim_steps=cfg.ddim_steps,
                seed=cfg.seed + i,
            )
            if generate_fn is not None:
                generated = generate_fn(sample, mask, run_cfg.seed)
                comp = composite(sample.person, generated, mask)
            else:
                generated, comp = pipeline.edit(
                    sample.person, sample.pose, mask, sample.texture.caption,
                    sample.texture.patch, run_cfg,
                )
            result = EditResult(
                original=sample.person,
                generated=generated,
                composite=comp,
                mask=mask,
                caption=sample.texture.caption,
                texture_patch=sample.texture.patch,
                sample_id=sample.sample_id,
            )
            real_feats.append(backbone.pooled(sample.person).numpy())
            gen_feats.append(backbone.pooled(comp).numpy())
            lpips_vals.append(perceptual_distance(sample.person, comp, backbone))
            s, ci = clip_scores(result, clip)
            clip_s_vals.append(s)
            clip_i_vals.append(ci)
            results.append(result)
        except Exception as err:
            failures.append(f"{record.get('id', i)}: {err}")

    if len(failures) > max_failure_fraction * len(manifest.records):
        raise RuntimeError(
            f"{len(failures)}/{len(manifest.records)} samples failed: {failures[:5]}"
        )
    if not results:
        raise RuntimeError("no samples evaluated")

    report = MetricReport(
        fid=frechet_distance(np.stack(gen_feats), np.stack(real_feats)),
        lpips_like=float(np.mean(lpips_vals)),
        clip_s=float(np.mean(clip_s_vals)),
        clip_i=float(np.mean(clip_i_vals)),
        n_samples=len(results),
        n_failed=len(failures),
        backends={
            "features": backbone.backend_id,
            "clip": clip.backend_id,
            "checkpoint": str(checkpoint_path) if checkpoint_path else "test-double",
        },
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json())
        with open(out_dir / "per_sample.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "clip_s", "clip_i", "lpips_like"])
            for r, s, ci, lp in zip(results, clip_s_vals, clip_i_vals, lpips_vals):
                writer.writerow([r.sample_id, f"{s:.6f}", f"{ci:.6f}", f"{lp:.6f}"])
        contact_sheet(results, out_dir / "contact_sheet.png")
        if failures:
            (out_dir / "failures.log").write_text("\n".join(failures))
    return report
