"""Checkpoint archive: raw float32 arrays + JSON manifest in a zip.

The archive is byte-deterministic (fixed entry timestamps, sorted entries)
so seeded runs reproduce identical files.  The manifest records the input
channel order version; loading a checkpoint with a different channel order
fails rather than silently misreading weights.
"""

from __future__ import annotations

import base64
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import CodecParams
from .unet import CHANNEL_ORDER, CHANNEL_ORDER_VERSION, DenoisingUNet, UNetConfig

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp for reproducible bytes


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "channel_order": list(CHANNEL_ORDER),
        "channel_order_version": CHANNEL_ORDER_VERSION,
        "meta": meta,
        "arrays": {},
    }
    blobs = []
    for i, name in enumerate(sorted(arrays)):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        fname = f"arrays/{i:05d}.bin"
        manifest["arrays"][name] = {"shape": list(arr.shape), "dtype": "<f4", "file": fname}
        blobs.append((fname, arr.tobytes()))

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for fname, data in blobs:
            info = zipfile.ZipInfo(fname, date_time=_EPOCH)
            zf.writestr(info, data)

    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest['format_version']}")
        if manifest["channel_order_version"] != CHANNEL_ORDER_VERSION:
            raise ValueError(
                "checkpoint channel order "
                f"{manifest['channel_order_version']!r} does not match "
                f"{CHANNEL_ORDER_VERSION!r}; refusing to load"
            )
        arrays = {}
        for name, entry in manifest["arrays"].items():
            raw = zf.read(entry["file"])
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]


def _state_dict_arrays(prefix: str, sd: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in sd.items()}


def _extract_state_dict(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    plen = len(prefix) + 1
    return {
        k[plen:]: torch.from_numpy(v.copy())
        for k, v in arrays.items()
        if k.startswith(prefix + ".")
    }


def encode_torch_rng(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def decode_torch_rng(data: str) -> torch.Generator:
    gen = torch.Generator()
    state = np.frombuffer(base64.b64decode(data), dtype=np.uint8).copy()
    gen.set_state(torch.from_numpy(state))
    return gen


@dataclass
class Checkpoint:
    unet_config: UNetConfig
    codec: CodecParams
    unet_state: dict
    texture_encoder_state: dict | None
    dp_unet_state: dict | None
    meta: dict

    def build_unet(self) -> DenoisingUNet:
        model = DenoisingUNet(self.unet_config)
        model.load_state_dict(self.unet_state)
        return model

    def build_dp_unet(self) -> DenoisingUNet | None:
        if self.dp_unet_state is None:
            return None
        model = DenoisingUNet(self.unet_config)
        model.load_state_dict(self.dp_unet_state)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model


def save_checkpoint(
    path: str | Path,
    model: DenoisingUNet,
    codec: CodecParams,
    texture_encoder=None,
    dp_unet=None,
    extra_arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    arrays = _state_dict_arrays("unet", model.state_dict())
    if texture_encoder is not None:
        arrays.update(_state_dict_arrays("texture_encoder", texture_encoder.state_dict()))
    if dp_unet is not None:
        arrays.update(_state_dict_arrays("dp_unet", dp_unet.state_dict()))
    if codec.kind == "learned":
        arrays.update({f"codec.{k}": v.detach().cpu().numpy() for k, v in codec.weights.items()})
    if extra_arrays:
        arrays.update(extra_arrays)
    full_meta = {
        "unet_config": asdict(model.config),
        "codec": {
            "kind": codec.kind,
            "downsample_factor": codec.downsample_factor,
            "projection_seed": codec.projection_seed,
        },
        "has_texture_encoder": texture_encoder is not None,
        "has_dp_unet": dp_unet is not None,
    }
    full_meta.update(meta or {})
    save_archive(path, arrays, full_meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, meta = load_archive(path)
    cfg_dict = dict(meta["unet_config"])
    cfg_dict["level_multipliers"] = tuple(cfg_dict["level_multipliers"])
    cfg_dict["attention_levels"] = tuple(cfg_dict["attention_levels"])
    unet_config = UNetConfig(**cfg_dict)
    codec_meta = meta["codec"]
    if codec_meta["kind"] == "learned":
        weights = _extract_state_dict(arrays, "codec")
        codec = CodecParams(
            kind="learned",
            downsample_factor=codec_meta["downsample_factor"],
            weights=weights,
        )
    else:
        codec = CodecParams(
            kind="projection",
            downsample_factor=codec_meta["downsample_factor"],
            projection_seed=codec_meta["projection_seed"],
        )
    tex_state = _extract_state_dict(arrays, "texture_encoder") if meta.get("has_texture_encoder") else None
    dp_state = _extract_state_dict(arrays, "dp_unet") if meta.get("has_dp_unet") else None
    return Checkpoint(
        unet_config=unet_config,
        codec=codec,
        unet_state=_extract_state_dict(arrays, "unet"),
        texture_encoder_state=tex_state,
        dp_unet_state=dp_state,
        meta=meta,
    )
