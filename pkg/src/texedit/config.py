"""Run configuration: one flat file (TOML or JSON) covering every module.

Unknown keys are rejected by name; every default is printable via the CLI's
--print-config so a resolved config can be fed back in to reproduce a run.
Backend URLs may be overridden by environment variables.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class CodecSection:
    kind: str = "projection"
    downsample_factor: int = 4
    projection_seed: int = 0


@dataclass
class ScheduleSection:
    num_steps: int = 50
    kind: str = "cosine"


@dataclass
class UNetSection:
    base_channels: int = 32
    level_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    attention_levels: list[int] = field(default_factory=lambda: [2, 3])
    cond_dim: int = 32
    n_heads: int = 4
    head_dim: int = 16


@dataclass
class SamplerSection:
    ddim_steps: int = 30
    guidance_scale: float = 5.0
    lambda_texture: float = 1.0
    seed: int = 42


@dataclass
class LocatorSection:
    backend: str = "oracle"
    url: str = ""
    timeout: float = 20.0
    score_threshold: float = 0.3
    dilation_radius: int = 3


@dataclass
class DatasetSection:
    image_size: int = 64
    patch_side: int = 32
    window: int = 32
    stride: int = 16
    fallback_window: int = 16
    captioner: str = "stub"
    captioner_url: str = ""
    garment_name: str = "shirt"


@dataclass
class TrainerSection:
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    stage1_steps: int = 2000
    stage2_steps: int = 500
    drop_text_p: float = 0.05
    drop_texture_p: float = 0.05
    drop_both_p: float = 0.05
    seed: int = 0
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    augment: bool = True
    augment_limit: float = 0.2
    texture_backend: str = "learned"
    cond_lr_scale: float = 1.0


@dataclass
class EvaluatorSection:
    clip_backend: str = "stub"
    crop_side: int = 32
    feature_seed: int = 0


@dataclass
class EmbedderSection:
    text_backend: str = "stub"
    text_url: str = ""
    texture_url: str = ""
    timeout: float = 10.0


@dataclass
class RunConfig:
    codec: CodecSection = field(default_factory=CodecSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    unet: UNetSection = field(default_factory=UNetSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    locator: LocatorSection = field(default_factory=LocatorSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    evaluator: EvaluatorSection = field(default_factory=EvaluatorSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


_ENV_OVERRIDES = {
    "TEXEDIT_LOCATOR_URL": ("locator", "url"),
    "TEXEDIT_CAPTIONER_URL": ("dataset", "captioner_url"),
    "TEXEDIT_TEXT_EMBED_URL": ("embedder", "text_url"),
    "TEXEDIT_TEXTURE_EMBED_URL": ("embedder", "texture_url"),
}


def _build_section(cls, data: dict, path: str):
    valid = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid config section {path}: {err}") from err


_SECTION_TYPES = {
    "codec": CodecSection,
    "schedule": ScheduleSection,
    "unet": UNetSection,
    "sampler": SamplerSection,
    "locator": LocatorSection,
    "dataset": DatasetSection,
    "trainer": TrainerSection,
    "evaluator": EvaluatorSection,
    "embedder": EmbedderSection,
}


def config_from_dict(data: dict) -> RunConfig:
    kwargs = {}
    for key, value in data.items():
        if key not in _SECTION_TYPES:
            raise ConfigError(f"unknown config key {key}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key} must be a table/object")
        kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None, apply_env: bool = True) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix == ".toml":
            data = tomllib.loads(path.read_text())
        elif path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            raise ConfigError(f"config must be .toml or .json, got {path.suffix!r}")
        cfg = config_from_dict(data)
    if apply_env:
        for env, (section, key) in _ENV_OVERRIDES.items():
            value = os.environ.get(env)
            if value:
                setattr(getattr(cfg, section), key, value)
    return cfg
