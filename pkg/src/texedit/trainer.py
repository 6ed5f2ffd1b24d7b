"""Two-stage training: noise-prediction loss with multi-condition dropout.

Stage 1 trains the denoiser plus the decoupled cross-attention projections
and the learned texture encoder, with the detail path disabled.  Stage 2
freezes everything except the fused self-attention q/k/v projections and
enables detail features from a frozen copy of the stage-1 encoder.
"""

from __future__ import annotations

import copy
import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import CodecParams, downsample_mask, encode
from .conditioning import (
    CANONICAL_PATCH_SIDE,
    HashedTextEmbedder,
    LearnedTextureEncoder,
    StubTextureEmbedder,
    null_text_tokens,
)
from .dataset import apply_augment, draw_augment_params, load_manifest, load_sample
from .diffusion import NoiseSchedule, training_pair
from .images import resize_image
from .region import apply_mask, dilate
from .unet import DenoisingUNet, UNetConfig, init_params


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    steps: int = 2000
    drop_text_p: float = 0.05
    drop_texture_p: float = 0.05
    drop_both_p: float = 0.05
    seed: int = 0
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    augment: bool = True
    augment_limit: float = 0.2
    dilation_radius: int = 3
    lambda_texture: float = 1.0
    cond_lr_scale: float = 1.0  # lr multiplier for cross-attention + texture encoder

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        probs = (self.drop_text_p, self.drop_texture_p, self.drop_both_p)
        if any(p < 0 for p in probs) or sum(probs) > 1.0:
            raise ValueError("drop probabilities must be >= 0 and sum to <= 1")
        if self.cond_lr_scale <= 0:
            raise ValueError("cond_lr_scale must be positive")


def draw_condition_drop(rng: np.random.Generator, cfg: TrainConfig) -> tuple[bool, bool]:
    """Disjoint-interval draw: both-drop first, then the individual drops."""
    u = rng.random()
    if u < cfg.drop_both_p:
        return True, True
    if u < cfg.drop_both_p + cfg.drop_text_p:
        return True, False
    if u < cfg.drop_both_p + cfg.drop_text_p + cfg.drop_texture_p:
        return False, True
    return False, False


class SampleStore:
    """In-memory view over a manifest; patch choice is drawn per access."""

    def __init__(self, manifest_path: str | Path):
        self.root = Path(manifest_path).parent
        self.manifest = load_manifest(manifest_path)
        self.records = self.manifest.records
        if not self.records:
            raise ValueError("dataset manifest is empty")

    def __len__(self) -> int:
        return len(self.records)

    def get(self, index: int, rng: np.random.Generator):
        record = self.records[index]
        patch_index = int(rng.integers(0, len(record["patches"])))
        return load_sample(record, self.root, patch_index)


class TrainState:
    def __init__(
        self,
        model: DenoisingUNet,
        texture_encoder,
        codec: CodecParams,
        schedule: NoiseSchedule,
        optimizer: torch.optim.Optimizer,
        trainable_names: list[str],
        trainable_params: list[torch.nn.Parameter],
        torch_gen: torch.Generator,
        np_rng: np.random.Generator,
        stage: int,
        step: int = 0,
        dp_unet: DenoisingUNet | None = None,
        texture_backend: str = "learned",
    ):
        self.model = model
        self.texture_encoder = texture_encoder
        self.codec = codec
        self.schedule = schedule
        self.optimizer = optimizer
        self.trainable_names = trainable_names
        self.trainable_params = trainable_params
        self.torch_gen = torch_gen
        self.np_rng = np_rng
        self.stage = stage
        self.step = step
        self.dp_unet = dp_unet
        self.texture_backend = texture_backend
        self.text_embedder = HashedTextEmbedder(model.config.cond_dim)


def _named_trainables(state_like: dict[str, torch.nn.Parameter]) -> tuple[list[str], list[torch.nn.Parameter]]:
    names = sorted(state_like)
    return names, [state_like[n] for n in names]


def _is_conditioning_param(name: str) -> bool:
    return ".ca_" in name or name.startswith("texture_encoder.")


def _build_optimizer(names: list[str], params, cfg: TrainConfig) -> torch.optim.Optimizer:
    common = dict(weight_decay=cfg.weight_decay, betas=(0.9, 0.999), eps=1e-8)
    if cfg.cond_lr_scale == 1.0:
        return torch.optim.AdamW(params, lr=cfg.lr, **common)
    trunk = [p for n, p in zip(names, params) if not _is_conditioning_param(n)]
    cond = [p for n, p in zip(names, params) if _is_conditioning_param(n)]
    groups = [{"params": trunk, "lr": cfg.lr}]
    if cond:
        groups.append({"params": cond, "lr": cfg.lr * cfg.cond_lr_scale})
    return torch.optim.AdamW(groups, lr=cfg.lr, **common)


def new_train_state(
    unet_config: UNetConfig,
    codec: CodecParams,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    texture_backend: str = "learned",
) -> TrainState:
    if cfg.stage != 1:
        raise ValueError("fresh states start at stage 1; stage 2 resumes from a checkpoint")
    model = init_params(unet_config, cfg.seed)
    if texture_backend == "learned":
        texture_encoder = LearnedTextureEncoder(unet_config.cond_dim)
    else:
        texture_encoder = StubTextureEmbedder(unet_config.cond_dim)
    trainables = {f"unet.{n}": p for n, p in model.named_parameters()}
    if texture_backend == "learned":
        trainables.update(
            {f"texture_encoder.{n}": p for n, p in texture_encoder.named_parameters()}
        )
    names, params = _named_trainables(trainables)
    return TrainState(
        model=model,
        texture_encoder=texture_encoder,
        codec=codec,
        schedule=schedule,
        optimizer=_build_optimizer(names, params, cfg),
        trainable_names=names,
        trainable_params=params,
        torch_gen=torch.Generator().manual_seed(cfg.seed + 1),
        np_rng=np.random.default_rng(cfg.seed + 2),
        stage=1,
        texture_backend=texture_backend,
    )


def stage2_state_from_checkpoint(path: str | Path, cfg: TrainConfig, schedule: NoiseSchedule) -> TrainState:
    """Load a stage-1 checkpoint and set up the stage-2 trainable subset."""
    loaded = ckpt.load_checkpoint(path)
    if loaded.meta.get("train", {}).get("stage") != 1:
        raise ValueError(f"stage 2 requires a stage-1 checkpoint, got {path}")
    model = loaded.build_unet()
    dp_unet = copy.deepcopy(model)
    dp_unet.eval()
    for p in dp_unet.parameters():
        p.requires_grad_(False)

    texture_backend = loaded.meta.get("texture_backend", "learned")
    if texture_backend == "learned":
        texture_encoder = LearnedTextureEncoder(model.config.cond_dim)
        texture_encoder.load_state_dict(loaded.texture_encoder_state)
        for p in texture_encoder.parameters():
            p.requires_grad_(False)
    else:
        texture_encoder = StubTextureEmbedder(model.config.cond_dim)

    fused = model.fused_attention_parameters()
    for name, p in model.named_parameters():
        p.requires_grad_(name in fused)
    trainables = {f"unet.{n}": p for n, p in fused.items()}
    names, params = _named_trainables(trainables)
    return TrainState(
        model=model,
        texture_encoder=texture_encoder,
        codec=loaded.codec,
        schedule=schedule,
        optimizer=_build_optimizer(names, params, cfg),
        trainable_names=names,
        trainable_params=params,
        torch_gen=torch.Generator().manual_seed(cfg.seed + 1),
        np_rng=np.random.default_rng(cfg.seed + 2),
        stage=2,
        dp_unet=dp_unet,
        texture_backend=texture_backend,
    )


def _embed_patch_batch(state: TrainState, patches: torch.Tensor) -> torch.Tensor:
    if isinstance(state.texture_encoder, LearnedTextureEncoder):
        return state.texture_encoder(patches)
    tokens = [state.texture_encoder.embed(p.permute(1, 2, 0)) for p in patches]
    return torch.stack(tokens)


def prepare_batch(samples: list, state: TrainState, cfg: TrainConfig) -> dict:
    """Encode a list of EditSamples into batched training tensors."""
    f = state.codec.downsample_factor
    z13_list, eps_list, t_list, text_list, patch_list = [], [], [], [], []
    drop_text_flags, drop_texture_flags = [], []
    n_text_only = n_texture_only = n_both = 0
    for sample in samples:
        if cfg.augment:
            sample = apply_augment(
                sample, draw_augment_params(state.np_rng, limit=cfg.augment_limit)
            )
        mask = dilate(sample.mask, cfg.dilation_radius)
        masked = apply_mask(sample.person, mask)
        z0 = encode(sample.person, state.codec)
        zp = encode(sample.pose, state.codec)
        zm = encode(masked, state.codec)
        mlat = downsample_mask(mask, f)
        t, z_t, eps = training_pair(z0, state.schedule, state.torch_gen)
        z13 = torch.cat([z_t, mlat, zp, zm], dim=-1).permute(2, 0, 1)

        drop_text, drop_texture = draw_condition_drop(state.np_rng, cfg)
        n_both += drop_text and drop_texture
        n_text_only += drop_text and not drop_texture
        n_texture_only += drop_texture and not drop_text
        if drop_text:
            text = null_text_tokens(state.model.config.cond_dim)
        else:
            text = state.text_embedder.embed(sample.texture.caption)

        patch = resize_image(sample.texture.patch, CANONICAL_PATCH_SIDE)
        z13_list.append(z13)
        eps_list.append(eps.permute(2, 0, 1))
        t_list.append(t)
        text_list.append(text)
        patch_list.append(patch.permute(2, 0, 1))
        drop_text_flags.append(drop_text)
        drop_texture_flags.append(drop_texture)

    return {
        "z13": torch.stack(z13_list),
        "eps": torch.stack(eps_list),
        "t": torch.tensor(t_list),
        "text": torch.stack(text_list),
        "patches": torch.stack(patch_list),
        "drop_texture": torch.tensor(drop_texture_flags),
        "counts": {
            "drop_text": n_text_only,
            "drop_texture": n_texture_only,
            "drop_both": n_both,
        },
    }


def loss_step(samples: list, state: TrainState, cfg: TrainConfig, predictor=None) -> tuple[torch.Tensor, dict]:
    """Mean-squared error between true and predicted noise over one batch.

    `predictor` may replace the network (test double); it receives the same
    batched arguments as the model forward.
    """
    if not samples:
        raise ValueError("empty batch")
    batch = prepare_batch(samples, state, cfg)
    texture_tokens = _embed_patch_batch(state, batch["patches"])
    keep = (~batch["drop_texture"]).to(texture_tokens.dtype)[:, None, None]
    texture_tokens = texture_tokens * keep

    model_fn = predictor if predictor is not None else state.model
    use_details = state.stage == 2 and state.dp_unet is not None
    if not use_details:
        pred = model_fn(
            batch["z13"], batch["t"], batch["text"], texture_tokens, None, cfg.lambda_texture
        )
    else:
        pred = _forward_with_details(model_fn, state, cfg, batch, texture_tokens)

    loss = torch.mean((pred - batch["eps"]) ** 2)
    if not torch.isfinite(loss):
        ids = [s.sample_id for s in samples]
        raise FloatingPointError(f"non-finite loss on batch {ids}")
    return loss, batch["counts"]


def _forward_with_details(model_fn, state: TrainState, cfg: TrainConfig, batch, texture_tokens):
    """Split the batch on the texture-drop flag: dropped samples get empty details."""
    drop = batch["drop_texture"]
    on_idx = torch.nonzero(~drop, as_tuple=True)[0]
    off_idx = torch.nonzero(drop, as_tuple=True)[0]
    pred = torch.empty_like(batch["eps"])
    if len(on_idx) > 0:
        per_level: dict[int, list[torch.Tensor]] = {}
        for i in on_idx.tolist():
            patch_hwc = batch["patches"][i].permute(1, 2, 0)
            lat = encode(patch_hwc, state.codec)
            tokens = state.dp_unet.detail_tokens(lat)
            for level, tok in tokens.items():
                per_level.setdefault(level, []).append(tok)
        details = {level: torch.stack(toks) for level, toks in per_level.items()}
        pred[on_idx] = model_fn(
            batch["z13"][on_idx],
            batch["t"][on_idx],
            batch["text"][on_idx],
            texture_tokens[on_idx],
            details,
            cfg.lambda_texture,
        )
    if len(off_idx) > 0:
        pred[off_idx] = model_fn(
            batch["z13"][off_idx],
            batch["t"][off_idx],
            batch["text"][off_idx],
            texture_tokens[off_idx],
            None,
            cfg.lambda_texture,
        )
    return pred


def param_hashes(module: torch.nn.Module) -> dict[str, str]:
    return {
        name: hashlib.sha256(p.detach().numpy().tobytes()).hexdigest()
        for name, p in module.named_parameters()
    }


def _optimizer_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for name, p in zip(state.trainable_names, state.trainable_params):
        st = state.optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                arrays[f"optim.{name}.{key}"] = st[key].detach().numpy()
        if "step" in st:
            arrays[f"optim.{name}.step"] = np.asarray(float(st["step"]), dtype=np.float32)
    return arrays


def _restore_optimizer(state: TrainState, arrays: dict[str, np.ndarray]) -> None:
    for name, p in zip(state.trainable_names, state.trainable_params):
        entry = {}
        for key in ("exp_avg", "exp_avg_sq"):
            arr = arrays.get(f"optim.{name}.{key}")
            if arr is not None:
                entry[key] = torch.from_numpy(arr.copy())
        step_arr = arrays.get(f"optim.{name}.step")
        if step_arr is not None:
            entry["step"] = torch.tensor(float(np.ravel(step_arr)[0]))
        if entry:
            state.optimizer.state[p] = entry


def save_train_state(state: TrainState, path: str | Path, train_cfg: TrainConfig) -> None:
    meta = {
        "texture_backend": state.texture_backend,
        "schedule": {"T": state.schedule.num_steps, "kind": "cosine"},
        "lambda_texture": train_cfg.lambda_texture,
        "dilation_radius": train_cfg.dilation_radius,
        "train": {
            "stage": state.stage,
            "step": state.step,
            "seed": train_cfg.seed,
            "torch_rng": ckpt.encode_torch_rng(state.torch_gen),
            "numpy_rng": state.np_rng.bit_generator.state,
            "trainable_names": state.trainable_names,
        },
    }
    texture_encoder = (
        state.texture_encoder if isinstance(state.texture_encoder, LearnedTextureEncoder) else None
    )
    ckpt.save_checkpoint(
        path,
        state.model,
        state.codec,
        texture_encoder=texture_encoder,
        dp_unet=state.dp_unet,
        extra_arrays=_optimizer_arrays(state),
        meta=meta,
    )


def load_train_state(path: str | Path, cfg: TrainConfig) -> TrainState:
    loaded = ckpt.load_checkpoint(path)
    arrays, _ = ckpt.load_archive(path)
    train_meta = loaded.meta["train"]
    stage = train_meta["stage"]
    if stage != cfg.stage:
        raise ValueError(f"checkpoint stage {stage} != configured stage {cfg.stage}")
    schedule = NoiseSchedule.cosine(loaded.meta["schedule"]["T"])
    model = loaded.build_unet()
    texture_backend = loaded.meta.get("texture_backend", "learned")
    if texture_backend == "learned":
        texture_encoder = LearnedTextureEncoder(model.config.cond_dim)
        texture_encoder.load_state_dict(loaded.texture_encoder_state)
    else:
        texture_encoder = StubTextureEmbedder(model.config.cond_dim)
    dp_unet = loaded.build_dp_unet()

    if stage == 2:
        fused = model.fused_attention_parameters()
        for name, p in model.named_parameters():
            p.requires_grad_(name in fused)
        if texture_backend == "learned":
            for p in texture_encoder.parameters():
                p.requires_grad_(False)
        trainables = {f"unet.{n}": p for n, p in fused.items()}
    else:
        trainables = {f"unet.{n}": p for n, p in model.named_parameters()}
        if texture_backend == "learned":
            trainables.update(
                {f"texture_encoder.{n}": p for n, p in texture_encoder.named_parameters()}
            )
    names, params = _named_trainables(trainables)
    if names != train_meta["trainable_names"]:
        raise ValueError("checkpoint trainable set does not match configuration")

    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = train_meta["numpy_rng"]
    state = TrainState(
        model=model,
        texture_encoder=texture_encoder,
        codec=loaded.codec,
        schedule=schedule,
        optimizer=_build_optimizer(names, params, cfg),
        trainable_names=names,
        trainable_params=params,
        torch_gen=ckpt.decode_torch_rng(train_meta["torch_rng"]),
        np_rng=np_rng,
        stage=stage,
        step=train_meta["step"],
        dp_unet=dp_unet,
        texture_backend=texture_backend,
    )
    _restore_optimizer(state, arrays)
    return state


def train_loop(
    state: TrainState,
    store: SampleStore,
    cfg: TrainConfig,
    out_dir: str | Path,
    log_every: int = 50,
) -> TrainState:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"train_stage{state.stage}.csv"
    write_header = not csv_path.exists()
    trainable_params = state.trainable_params

    with open(csv_path, "a", newline="") as csv_file:
        writer = csv.writer(csv_file)
        if write_header:
            writer.writerow(
                ["step", "stage", "loss", "lr", "n_drop_text", "n_drop_texture", "n_drop_both"]
            )
        while state.step < cfg.steps:
            idx = state.np_rng.integers(0, len(store), size=cfg.batch_size)
            samples = [store.get(int(i), state.np_rng) for i in idx]
            loss, counts = loss_step(samples, state, cfg)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(trainable_params, cfg.grad_clip)
            state.optimizer.step()
            state.step += 1
            writer.writerow(
                [
                    state.step,
                    state.stage,
                    f"{loss.item():.6f}",
                    cfg.lr,
                    counts["drop_text"],
                    counts["drop_texture"],
                    counts["drop_both"],
                ]
            )
            if log_every and state.step % log_every == 0:
                print(f"stage {state.stage} step {state.step}/{cfg.steps} loss {loss.item():.4f}")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_train_state(state, out_dir / f"stage{state.stage}_step{state.step:06d}.ckpt", cfg)
    save_train_state(state, out_dir / f"stage{state.stage}.ckpt", cfg)
    return state


def train_stage1(
    cfg: TrainConfig,
    store: SampleStore,
    out_dir: str | Path,
    unet_config: UNetConfig,
    codec: CodecParams,
    schedule: NoiseSchedule,
    resume: str | Path | None = None,
    texture_backend: str = "learned",
) -> TrainState:
    if cfg.stage != 1:
        raise ValueError("train_stage1 requires cfg.stage == 1")
    if resume:
        state = load_train_state(resume, cfg)
    else:
        state = new_train_state(unet_config, codec, schedule, cfg, texture_backend)
    return train_loop(state, store, cfg, out_dir)


def train_stage2(
    cfg: TrainConfig,
    store: SampleStore,
    out_dir: str | Path,
    stage1_checkpoint: str | Path,
    schedule: NoiseSchedule,
    resume: str | Path | None = None,
) -> TrainState:
    if cfg.stage != 2:
        raise ValueError("train_stage2 requires cfg.stage == 2")
    if resume:
        state = load_train_state(resume, cfg)
    else:
        if not Path(stage1_checkpoint).exists():
            raise FileNotFoundError(f"missing stage-1 checkpoint {stage1_checkpoint}")
        state = stage2_state_from_checkpoint(stage1_checkpoint, cfg, schedule)
    return train_loop(state, store, cfg, out_dir)
