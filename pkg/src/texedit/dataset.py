"""Dataset construction: texture patches, captions, synthetic samples, manifests.

Two sources feed the same manifest format: a procedural generator that
renders garment-wearing stand-ins at 64x64 for desk-scale training, and an
ingestor for directory trees following the paired person/garment try-on
layout (person image, garment-on-person mask, densepose render, flat
garment photo, flat garment mask).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
import torch
from PIL import Image, ImageDraw

from .errors import NoExtractableTextureError, ShapeError, TransportError
from .images import (
    from_uint8,
    image_to_b64,
    load_image,
    load_mask,
    save_image,
    save_mask,
    to_uint8,
)

MANIFEST_SCHEMA = "editsample/v1"

# name -> uint8 RGB; integer channel values keep PNG round-trips exact.
# Channels stay within [40, 215] so cell-mean latents (amplitude 4x the
# pixel value at downsample factor 4) never hit the sampler's x0 clamp.
PALETTE = {
    "red": (200, 40, 40),
    "blue": (40, 70, 200),
    "green": (40, 160, 70),
    "yellow": (215, 200, 50),
    "white": (215, 215, 215),
    "black": (40, 40, 40),
    "orange": (215, 130, 40),
    "purple": (130, 50, 180),
    "cyan": (50, 190, 200),
    "magenta": (200, 50, 160),
}

BACKGROUNDS = ((190, 190, 185), (160, 175, 190), (205, 195, 175), (150, 150, 155))
SKIN = (215, 170, 110)
LEG = (70, 70, 90)

TEXTURE_FAMILIES = ("solid", "stripes", "checks", "dots")


def _to_unit(rgb: tuple[int, int, int]) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0


@dataclass
class TextureSpec:
    family: str
    color_a: str
    color_b: str
    period: int = 8
    orientation: str = "h"  # stripes only

    def __post_init__(self):
        if self.family not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {self.family!r}")
        for c in (self.color_a, self.color_b):
            if c not in PALETTE:
                raise ValueError(f"unknown palette color {c!r}")


def render_texture(spec: TextureSpec, height: int, width: int, row0: int = 0, col0: int = 0) -> torch.Tensor:
    """Evaluate the procedural pattern on a window of the texture plane."""
    rows = np.arange(row0, row0 + height)[:, None]
    cols = np.arange(col0, col0 + width)[None, :]
    a = _to_unit(PALETTE[spec.color_a])
    b = _to_unit(PALETTE[spec.color_b])
    p = spec.period
    if spec.family == "solid":
        pick_b = np.zeros((height, width), dtype=bool)
    elif spec.family == "stripes":
        axis = rows if spec.orientation == "h" else cols
        pick_b = (axis // p) % 2 == 1
        pick_b = np.broadcast_to(pick_b, (height, width))
    elif spec.family == "checks":
        pick_b = ((rows // p) + (cols // p)) % 2 == 1
    else:  # dots
        r_dot = max(1, p // 3)
        cy = rows % p - p / 2 + 0.5
        cx = cols % p - p / 2 + 0.5
        pick_b = (cy * cy + cx * cx) <= r_dot * r_dot
    img = np.where(pick_b[..., None], b, a).astype(np.float32)
    return torch.from_numpy(img)


def caption_for(spec: TextureSpec) -> str:
    if spec.family == "solid":
        return f"solid {spec.color_a} fabric, smooth texture"
    if spec.family == "stripes":
        return f"{spec.color_a} and {spec.color_b} striped fabric, {spec.period}px stripes"
    if spec.family == "checks":
        return f"{spec.color_a} and {spec.color_b} checked fabric, {spec.period}px checks"
    return f"{spec.color_b} dots on {spec.color_a} fabric, {spec.period}px spacing"


@dataclass
class TexturePatchRecord:
    patch: torch.Tensor
    window: int
    origin: tuple[int, int]
    garment_id: str
    caption: str = ""
    caption_source: str = "none"


@dataclass
class EditSample:
    person: torch.Tensor
    garment_name: str
    pose: torch.Tensor
    mask: torch.Tensor
    texture: TexturePatchRecord
    sample_id: str = ""
    texture_spec: TextureSpec | None = None


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def _contained_origins(mask: np.ndarray, window: int, stride: int) -> list[tuple[int, int]]:
    h, w = mask.shape
    if window > h or window > w:
        return []
    # integral image: a window is fully inside the mask iff its sum == window^2
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask > 0.5, axis=0), axis=1)
    origins = []
    for r in range(0, h - window + 1, stride):
        for c in range(0, w - window + 1, stride):
            s = (
                integral[r + window, c + window]
                - integral[r, c + window]
                - integral[r + window, c]
                + integral[r, c]
            )
            if s == window * window:
                origins.append((r, c))
    return origins


def extract_patches(
    garment: torch.Tensor,
    mask: torch.Tensor,
    window: int,
    stride: int,
    fallback_window: int,
    garment_id: str = "",
) -> list[TexturePatchRecord]:
    """Sliding-window patches fully contained in the garment mask.

    Windows are enumerated row-major from origin (0, 0) at the given stride.
    If no window qualifies, the scan repeats at fallback_window with stride
    fallback_window // 2; if that also fails, raises.
    """
    if garment.shape[:2] != mask.shape:
        raise ShapeError("garment and mask dims differ")
    if stride != window // 2:
        raise ValueError(f"stride must be window // 2, got {stride} for window {window}")
    if fallback_window >= window:
        raise ValueError("fallback_window must be smaller than window")
    m = mask.numpy()
    plans = [(window, stride), (fallback_window, fallback_window // 2)]
    for win, st in plans:
        origins = _contained_origins(m, win, st)
        if origins:
            return [
                TexturePatchRecord(
                    patch=garment[r : r + win, c : c + win].clone(),
                    window=win,
                    origin=(r, c),
                    garment_id=garment_id,
                )
                for r, c in origins
            ]
    raise NoExtractableTextureError(garment_id)


# ---------------------------------------------------------------------------
# captioning
# ---------------------------------------------------------------------------

INSTRUCTIONS = (
    "Describe this fabric swatch: name its color, texture, fabric material, and pattern.",
    "List the main colors and the texture you see in this garment fabric.",
    "What fabric material is shown here, and what texture does its surface have?",
    "Write a short design note covering the color, texture, and pattern of this swatch.",
    "Point out the most distinctive texture and pattern features of this fabric.",
    "Give a full account of this fabric's color, material, and texture.",
    "Summarize the look of this fabric, focusing on its texture and pattern.",
)


class TemplateCaptioner:
    """Deterministic offline captioner.

    With a known TextureSpec it emits the generator's template string; without
    one it falls back to a palette-quantized pixel analysis of the patch.
    """

    backend_id = "template/v1"

    def caption(self, patch: torch.Tensor, instruction: str, spec: TextureSpec | None = None) -> str:
        if spec is not None:
            return caption_for(spec)
        arr = to_uint8(patch).reshape(-1, 3).astype(np.int32)
        names = list(PALETTE)
        colors = np.asarray([PALETTE[n] for n in names], dtype=np.int32)
        nearest = np.argmin(
            ((arr[:, None, :] - colors[None, :, :]) ** 2).sum(-1), axis=1
        )
        counts = np.bincount(nearest, minlength=len(names))
        order = np.argsort(-counts)
        top, second = names[order[0]], names[order[1]]
        if counts[order[1]] < 0.03 * arr.shape[0]:
            return f"solid {top} fabric, smooth texture"
        return f"{top} and {second} patterned fabric"


class ExternalCaptioner:
    """HTTP captioning client; patches are upscaled to 256x256 before sending."""

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 1):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backend_id = f"extcaption:{url}"

    def caption(self, patch: torch.Tensor, instruction: str, spec: TextureSpec | None = None) -> str:
        pil = Image.fromarray(to_uint8(patch), mode="RGB").resize((256, 256), Image.NEAREST)
        b64 = image_to_b64(from_uint8(np.asarray(pil)))
        last_err: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(
                    self.url,
                    json={"image": b64, "instruction": instruction},
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                data = resp.json()
                break
            except (requests.RequestException, ValueError) as err:
                last_err = err
        else:
            raise TransportError(f"caption backend {self.url} failed: {last_err}")
        caption = data.get("caption", "")
        if not caption:
            raise ValueError("caption backend returned an empty caption")
        return caption


def caption_patch(
    patch: torch.Tensor,
    captioner,
    instruction_index: int,
    spec: TextureSpec | None = None,
) -> str:
    if not 1 <= instruction_index <= len(INSTRUCTIONS):
        raise ValueError(f"instruction_index must be in 1..{len(INSTRUCTIONS)}")
    return captioner.caption(patch, INSTRUCTIONS[instruction_index - 1], spec=spec)


# ---------------------------------------------------------------------------
# synthetic samples
# ---------------------------------------------------------------------------


def rasterize_convex_polygon(vertices: np.ndarray, height: int, width: int) -> torch.Tensor:
    """Binary mask of pixel centers inside a convex polygon (vertices in order).

    A pixel (r, c) is inside when its center (c + 0.5, r + 0.5) lies on a
    consistent side of every directed edge.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    n = len(vertices)
    signs = []
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        signs.append(cross)
    stack = np.stack(signs)
    inside = np.all(stack >= 0, axis=0) | np.all(stack <= 0, axis=0)
    return torch.from_numpy(inside.astype(np.float32))


def _draw_pose(size: int, quad: np.ndarray, head_center: tuple[float, float], head_r: float) -> torch.Tensor:
    img = Image.new("RGB", (size, size), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    (slx, sly), (srx, sry), (hrx, hry), (hlx, hly) = quad
    neck = ((slx + srx) / 2, (sly + sry) / 2)
    hip = ((hlx + hrx) / 2, (hly + hry) / 2)
    white = (255, 255, 255)
    draw.line([neck, hip], fill=white, width=1)
    draw.line([(slx, sly), (srx, sry)], fill=white, width=1)
    draw.line([(slx, sly), (slx - 4, sly + 14)], fill=white, width=1)
    draw.line([(srx, sry), (srx + 4, sry + 14)], fill=white, width=1)
    draw.line([(hlx, hly), (hlx - 1, min(size - 2, hly + 14))], fill=white, width=1)
    draw.line([(hrx, hry), (hrx + 1, min(size - 2, hry + 14))], fill=white, width=1)
    cx, cy = head_center
    draw.ellipse([cx - head_r, cy - head_r, cx + head_r, cy + head_r], outline=white, width=1)
    return from_uint8(np.asarray(img))


def draw_texture_spec(rng: np.random.Generator) -> TextureSpec:
    family = TEXTURE_FAMILIES[rng.integers(0, len(TEXTURE_FAMILIES))]
    names = list(PALETTE)
    ia = int(rng.integers(0, len(names)))
    ib = int(rng.integers(0, len(names) - 1))
    if ib >= ia:
        ib += 1
    period = int(rng.choice([4, 8, 16]))
    orientation = "h" if rng.random() < 0.5 else "v"
    return TextureSpec(family, names[ia], names[ib], period, orientation)


def generate_synthetic_sample(
    spec: TextureSpec,
    rng: np.random.Generator,
    size: int = 64,
    patch_side: int = 32,
    sample_id: str = "",
) -> EditSample:
    """Render one person stand-in wearing the given texture.

    The garment is a convex torso quad filled with the procedural pattern;
    the mask is its exact rasterization; the pose image is a stick figure
    derived from the same geometry.
    """
    s = size / 64.0
    sly = float(rng.uniform(16, 21)) * s
    hly = float(rng.uniform(43, 48)) * s
    slx = float(rng.uniform(14, 19)) * s
    srx = float(rng.uniform(45, 50)) * s
    hlx = slx + float(rng.uniform(0, 4)) * s
    hrx = srx - float(rng.uniform(0, 4)) * s
    quad = np.asarray(
        [
            (slx, sly),
            (srx, sly + float(rng.uniform(-1.5, 1.5)) * s),
            (hrx, hly),
            (hlx, hly + float(rng.uniform(-1.5, 1.5)) * s),
        ]
    )

    bg = BACKGROUNDS[int(rng.integers(0, len(BACKGROUNDS)))]
    canvas = np.tile(_to_unit(bg), (size, size, 1)).astype(np.float32)

    # head above the shoulders, legs below the hips
    head_r = 5.5 * s
    head_center = ((slx + srx) / 2, sly - head_r - 2 * s)
    yy, xx = np.mgrid[0:size, 0:size]
    head = ((xx + 0.5 - head_center[0]) ** 2 + (yy + 0.5 - head_center[1]) ** 2) <= head_r**2
    canvas[head] = _to_unit(SKIN)
    leg_top = int(min(size - 1, hly))
    leg_bottom = min(size, leg_top + int(12 * s))
    for x0, x1 in ((hlx + 2 * s, hlx + 8 * s), (hrx - 8 * s, hrx - 2 * s)):
        canvas[leg_top:leg_bottom, int(x0) : int(x1)] = _to_unit(LEG)

    mask = rasterize_convex_polygon(quad, size, size)
    texture_full = render_texture(spec, size, size)
    inside = mask.numpy() > 0.5
    canvas[inside] = texture_full.numpy()[inside]

    pose = _draw_pose(size, quad, head_center, head_r)
    # patch = a crop of the same texture plane at a random phase
    row0 = int(rng.integers(0, 2 * spec.period))
    col0 = int(rng.integers(0, 2 * spec.period))
    patch = render_texture(spec, patch_side, patch_side, row0=row0, col0=col0)
    record = TexturePatchRecord(
        patch=patch,
        window=patch_side,
        origin=(0, 0),
        garment_id=sample_id or "synthetic",
        caption=caption_for(spec),
        caption_source="template",
    )
    return EditSample(
        person=torch.from_numpy(canvas),
        garment_name="shirt",
        pose=pose,
        mask=mask,
        texture=record,
        sample_id=sample_id,
        texture_spec=spec,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    flip: bool = False
    affine: bool = False
    shift_x: float = 0.0
    shift_y: float = 0.0
    scale: float = 1.0


def draw_augment_params(
    rng: np.random.Generator,
    flip_p: float = 0.5,
    affine_p: float = 0.5,
    limit: float = 0.2,
) -> AugmentParams:
    flip = bool(rng.random() < flip_p)
    if rng.random() < affine_p:
        return AugmentParams(
            flip=flip,
            affine=True,
            shift_x=float(rng.uniform(-limit, limit)),
            shift_y=float(rng.uniform(-limit, limit)),
            scale=float(1.0 + rng.uniform(-limit, limit)),
        )
    return AugmentParams(flip=flip)


def _warp(x: torch.Tensor, params: AugmentParams, mode: str) -> torch.Tensor:
    # sample grid maps output pixels back to input: inverse shift then inverse zoom
    theta = torch.tensor(
        [
            [1.0 / params.scale, 0.0, -2.0 * params.shift_x / params.scale],
            [0.0, 1.0 / params.scale, -2.0 * params.shift_y / params.scale],
        ],
        dtype=torch.float32,
    ).expand(x.shape[0], 2, 3)
    grid = torch.nn.functional.affine_grid(theta, list(x.shape), align_corners=False)
    return torch.nn.functional.grid_sample(
        x, grid, mode=mode, padding_mode="zeros", align_corners=False
    )


def apply_augment(sample: EditSample, params: AugmentParams) -> EditSample:
    """Apply one flip/affine draw jointly to person, pose, and mask.

    The texture patch and caption are left untouched; the mask is resampled
    with nearest-neighbor so it stays binary.
    """
    person, pose, mask = sample.person, sample.pose, sample.mask
    if params.flip:
        person = torch.flip(person, dims=(1,))
        pose = torch.flip(pose, dims=(1,))
        mask = torch.flip(mask, dims=(1,))
    if params.affine:
        img_batch = torch.stack([person, pose]).permute(0, 3, 1, 2)
        warped = _warp(img_batch, params, "bilinear").permute(0, 2, 3, 1)
        person, pose = warped[0], warped[1]
        mask = _warp(mask[None, None], params, "nearest")[0, 0]
    return EditSample(
        person=person.contiguous(),
        garment_name=sample.garment_name,
        pose=pose.contiguous(),
        mask=mask.contiguous(),
        texture=sample.texture,
        sample_id=sample.sample_id,
        texture_spec=sample.texture_spec,
    )


def augment(sample: EditSample, rng: np.random.Generator, limit: float = 0.2) -> EditSample:
    return apply_augment(sample, draw_augment_params(rng, limit=limit))


# ---------------------------------------------------------------------------
# manifests and file IO
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    records: list[dict]
    split: str
    stats: dict = field(default_factory=dict)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w") as f:
        for rec in manifest.records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    stats_path = path.with_suffix(path.suffix + ".stats.json")
    stats_path.write_text(
        json.dumps({"split": manifest.split, "stats": manifest.stats}, indent=1, sort_keys=True)
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records = []
    root = path.parent
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("schema") != MANIFEST_SCHEMA:
                raise ValueError(f"unknown manifest record schema {rec.get('schema')!r}")
            for key in ("person", "mask", "pose"):
                if not (root / rec[key]).exists():
                    raise FileNotFoundError(f"manifest references missing file {rec[key]}")
            for patch in rec["patches"]:
                if not (root / patch["file"]).exists():
                    raise FileNotFoundError(f"manifest references missing patch {patch['file']}")
            records.append(rec)
    stats_path = path.with_suffix(path.suffix + ".stats.json")
    split, stats = "train", {}
    if stats_path.exists():
        blob = json.loads(stats_path.read_text())
        split, stats = blob.get("split", "train"), blob.get("stats", {})
    return DatasetManifest(records=records, split=split, stats=stats)


def load_sample(record: dict, root: str | Path, patch_index: int = 0) -> EditSample:
    root = Path(root)
    patch_entry = record["patches"][patch_index]
    spec = None
    if record.get("texture_spec"):
        spec = TextureSpec(**record["texture_spec"])
    texture = TexturePatchRecord(
        patch=load_image(root / patch_entry["file"]),
        window=patch_entry["window"],
        origin=tuple(patch_entry["origin"]),
        garment_id=record["garment_id"],
        caption=patch_entry["caption"],
        caption_source=patch_entry["caption_source"],
    )
    return EditSample(
        person=load_image(root / record["person"]),
        garment_name=record["garment_name"],
        pose=load_image(root / record["pose"]),
        mask=load_mask(root / record["mask"]),
        texture=texture,
        sample_id=record["id"],
        texture_spec=spec,
    )


def build_synthetic_dataset(
    out_dir: str | Path,
    count: int,
    seed: int,
    split: str = "train",
    size: int = 64,
    patch_side: int = 32,
    id_prefix: str = "",
) -> tuple[Path, DatasetManifest]:
    """Generate `count` synthetic samples and write them plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        sid = f"{id_prefix}{split}{i:04d}"
        spec = draw_texture_spec(rng)
        sample = generate_synthetic_sample(spec, rng, size=size, patch_side=patch_side, sample_id=sid)
        sdir = out_dir / "samples" / sid
        sdir.mkdir(parents=True, exist_ok=True)
        save_image(sample.person, sdir / "person.png")
        save_mask(sample.mask, sdir / "mask.png")
        save_image(sample.pose, sdir / "pose.png")
        save_image(sample.texture.patch, sdir / "texture.png")
        rel = f"samples/{sid}"
        records.append(
            {
                "schema": MANIFEST_SCHEMA,
                "id": sid,
                "split": split,
                "garment_id": sid,
                "garment_name": sample.garment_name,
                "person": f"{rel}/person.png",
                "mask": f"{rel}/mask.png",
                "pose": f"{rel}/pose.png",
                "texture_spec": {
                    "family": spec.family,
                    "color_a": spec.color_a,
                    "color_b": spec.color_b,
                    "period": spec.period,
                    "orientation": spec.orientation,
                },
                "patches": [
                    {
                        "file": f"{rel}/texture.png",
                        "window": sample.texture.window,
                        "origin": list(sample.texture.origin),
                        "caption": sample.texture.caption,
                        "caption_source": sample.texture.caption_source,
                    }
                ],
            }
        )
    manifest = DatasetManifest(
        records=records,
        split=split,
        stats={"items": count, "patches": count, "fallback_patches": 0},
    )
    manifest_path = out_dir / f"manifest_{split}.jsonl"
    save_manifest(manifest, manifest_path)
    return manifest_path, manifest


VITON_DIRS = ("image", "image-mask", "image-densepose", "cloth", "cloth-mask")


def ingest_viton_layout(
    root: str | Path,
    out_dir: str | Path,
    split: str = "train",
    window: int = 128,
    stride: int = 64,
    fallback_window: int = 64,
    captioner=None,
    garment_name: str = "shirt",
) -> tuple[Path, DatasetManifest, list[str]]:
    """Ingest a paired try-on directory tree into a manifest.

    Expects root/<split>/{image,image-mask,image-densepose,cloth,cloth-mask}
    with matching file stems.  Per garment, extracts texture patches from the
    flat garment photo within its mask and captions each patch, cycling the
    instruction set round-robin.  Items with missing or unreadable files are
    flagged in the returned report and skipped; zero valid items is an error.
    """
    root = Path(root)
    out_dir = Path(out_dir)
    captioner = captioner or TemplateCaptioner()
    base = root / split
    issues: list[str] = []
    records: list[dict] = []
    n_patches = 0
    n_fallback = 0

    image_dir = base / "image"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"missing layout directory {image_dir}")
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)

    for img_path in sorted(image_dir.iterdir()):
        stem = img_path.stem
        paths = {}
        missing = False
        for d in VITON_DIRS:
            candidates = [p for p in (base / d).glob(stem + ".*") if p.is_file()]
            if not candidates:
                issues.append(f"{stem}: missing {d} counterpart")
                missing = True
                break
            paths[d] = candidates[0]
        if missing:
            continue
        try:
            person = load_image(paths["image"])
            person_mask = load_mask(paths["image-mask"])
            pose = load_image(paths["image-densepose"])
            cloth = load_image(paths["cloth"])
            cloth_mask = load_mask(paths["cloth-mask"])
        except Exception as err:  # unreadable/corrupt file: flag, keep going
            issues.append(f"{stem}: unreadable input ({err})")
            continue
        if person.shape[:2] != person_mask.shape or person.shape[:2] != pose.shape[:2]:
            issues.append(f"{stem}: person/mask/pose resolution mismatch")
            continue
        if cloth.shape[:2] != cloth_mask.shape:
            issues.append(f"{stem}: cloth/cloth-mask resolution mismatch")
            continue
        try:
            patches = extract_patches(cloth, cloth_mask, window, stride, fallback_window, stem)
        except NoExtractableTextureError:
            issues.append(f"{stem}: no extractable texture")
            continue
        patch_entries = []
        for k, rec in enumerate(patches):
            instruction_index = k % len(INSTRUCTIONS) + 1
            rec.caption = caption_patch(rec.patch, captioner, instruction_index)
            rec.caption_source = "mllm" if isinstance(captioner, ExternalCaptioner) else "template"
            fname = f"patches/{stem}_{k:03d}.png"
            save_image(rec.patch, out_dir / fname)
            patch_entries.append(
                {
                    "file": fname,
                    "window": rec.window,
                    "origin": list(rec.origin),
                    "caption": rec.caption,
                    "caption_source": rec.caption_source,
                }
            )
            if rec.window == fallback_window:
                n_fallback += 1
        n_patches += len(patch_entries)
        records.append(
            {
                "schema": MANIFEST_SCHEMA,
                "id": stem,
                "split": split,
                "garment_id": stem,
                "garment_name": garment_name,
                "person": str(paths["image"].resolve()),
                "mask": str(paths["image-mask"].resolve()),
                "pose": str(paths["image-densepose"].resolve()),
                "patches": patch_entries,
            }
        )

    if not records:
        raise ValueError(f"zero valid items under {base} ({len(issues)} issues)")
    manifest = DatasetManifest(
        records=records,
        split=split,
        stats={
            "items": len(records),
            "patches": n_patches,
            "fallback_patches": n_fallback,
            "issues": len(issues),
        },
    )
    manifest_path = out_dir / f"manifest_{split}.jsonl"
    save_manifest(manifest, manifest_path)
    return manifest_path, manifest, issues
