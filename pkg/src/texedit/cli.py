"""Operator command line: dataset building, training, editing, evaluation.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error,
3 region not found, 4 backend transport error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataset as ds
from .codec import CodecParams
from .config import RunConfig, load_config
from .diffusion import GuidanceConfig, NoiseSchedule
from .errors import ConfigError, RegionNotFoundError, TexEditError, TransportError
from .evaluator import EncoderClipBackend, FilterBankBackbone, StubClipBackend, evaluate_manifest
from .images import load_image, load_mask, save_image, save_mask
from .pipeline import EditPipeline
from .region import ExternalMaskBackend, OracleMaskBackend, locate
from .trainer import SampleStore, TrainConfig, train_stage1, train_stage2
from .unet import UNetConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_REGION = 3
EXIT_TRANSPORT = 4


def _unet_config(cfg: RunConfig) -> UNetConfig:
    u = cfg.unet
    return UNetConfig(
        base_channels=u.base_channels,
        level_multipliers=tuple(u.level_multipliers),
        attention_levels=tuple(u.attention_levels),
        cond_dim=u.cond_dim,
        n_heads=u.n_heads,
        head_dim=u.head_dim,
    )


def _codec(cfg: RunConfig) -> CodecParams:
    return CodecParams(
        kind=cfg.codec.kind,
        downsample_factor=cfg.codec.downsample_factor,
        projection_seed=cfg.codec.projection_seed,
    )


def _print_config(cfg: RunConfig) -> int:
    print(cfg.to_json())
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    cfg = load_config(args.config)
    if args.print_config:
        return _print_config(cfg)
    if args.mode == "synthetic":
        if args.count < 1:
            raise ConfigError("--count must be >= 1 for synthetic mode")
        _, manifest = ds.build_synthetic_dataset(
            args.out,
            count=args.count,
            seed=args.seed,
            split=args.split,
            size=cfg.dataset.image_size,
            patch_side=cfg.dataset.patch_side,
        )
        print(f"built {manifest.stats['items']} synthetic samples "
              f"({manifest.stats['patches']} patches) in {args.out}")
        return EXIT_OK
    if not args.root:
        raise ConfigError("--root is required for viton mode")
    captioner = None
    if cfg.dataset.captioner == "url" or args.captioner == "url":
        url = cfg.dataset.captioner_url
        if not url:
            raise ConfigError("captioner url not configured")
        captioner = ds.ExternalCaptioner(url)
    _, manifest, issues = ds.ingest_viton_layout(
        args.root,
        args.out,
        split=args.split,
        window=cfg.dataset.window,
        stride=cfg.dataset.stride,
        fallback_window=cfg.dataset.fallback_window,
        captioner=captioner,
        garment_name=cfg.dataset.garment_name,
    )
    print(
        f"ingested {manifest.stats['items']} items, {manifest.stats['patches']} patches "
        f"({manifest.stats['fallback_patches']} fallback), {len(issues)} issues"
    )
    for issue in issues:
        print(f"  issue: {issue}")
    return EXIT_OK


def _train_config(cfg: RunConfig, stage: int, seed: int | None) -> TrainConfig:
    t = cfg.trainer
    return TrainConfig(
        stage=stage,
        lr=t.lr,
        weight_decay=t.weight_decay,
        batch_size=t.batch_size,
        steps=t.stage1_steps if stage == 1 else t.stage2_steps,
        drop_text_p=t.drop_text_p,
        drop_texture_p=t.drop_texture_p,
        drop_both_p=t.drop_both_p,
        seed=t.seed if seed is None else seed,
        checkpoint_every=t.checkpoint_every,
        grad_clip=t.grad_clip,
        augment=t.augment,
        augment_limit=t.augment_limit,
        dilation_radius=cfg.locator.dilation_radius,
        lambda_texture=cfg.sampler.lambda_texture,
        cond_lr_scale=t.cond_lr_scale,
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.print_config:
        return _print_config(cfg)
    store = SampleStore(args.manifest)
    schedule = NoiseSchedule.cosine(cfg.schedule.num_steps)
    train_cfg = _train_config(cfg, args.stage, args.seed)
    if args.stage == 1:
        state = train_stage1(
            train_cfg,
            store,
            args.out,
            _unet_config(cfg),
            _codec(cfg),
            schedule,
            resume=args.resume,
            texture_backend=cfg.trainer.texture_backend,
        )
    else:
        stage1_ckpt = args.stage1_checkpoint or str(Path(args.out) / "stage1.ckpt")
        if not args.resume and not Path(stage1_ckpt).exists():
            print(f"error: stage 2 requires a stage-1 checkpoint (looked at {stage1_ckpt})",
                  file=sys.stderr)
            return EXIT_RUNTIME
        state = train_stage2(
            train_cfg, store, args.out, stage1_ckpt, schedule, resume=args.resume
        )
    print(f"stage {args.stage} finished at step {state.step}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_edit(args) -> int:
    cfg = load_config(args.config)
    if args.print_config:
        return _print_config(cfg)
    image_path = Path(args.image)
    person = load_image(image_path)
    texture = load_image(args.texture)

    if args.mask_backend == "file":
        if not args.mask:
            raise ConfigError("--mask is required with --mask-backend file")
        backend = OracleMaskBackend(load_mask(args.mask))
    elif args.mask_backend == "oracle":
        mask_path = Path(args.mask) if args.mask else image_path.with_name("mask.png")
        if not mask_path.exists():
            raise ConfigError(f"oracle mask not found at {mask_path}")
        backend = OracleMaskBackend(load_mask(mask_path))
    else:
        url = cfg.locator.url
        if not url:
            raise ConfigError("locator url not configured for --mask-backend url")
        backend = ExternalMaskBackend(
            url, timeout=cfg.locator.timeout, score_threshold=cfg.locator.score_threshold
        )
    mask = locate(person, args.garment_name, backend, cfg.locator.dilation_radius)

    pose_path = Path(args.pose) if args.pose else image_path.with_name("pose.png")
    if pose_path.exists():
        pose = load_image(pose_path)
    else:
        pose = person * 0.0  # no pose available: zero conditioning channel

    pipeline = EditPipeline.from_checkpoint(args.checkpoint)
    lam = getattr(args, "lambda")
    guidance = GuidanceConfig(
        guidance_scale=cfg.sampler.guidance_scale if args.guidance is None else args.guidance,
        lambda_texture=cfg.sampler.lambda_texture if lam is None else lam,
        ddim_steps=cfg.sampler.ddim_steps if args.steps is None else args.steps,
        seed=cfg.sampler.seed if args.seed is None else args.seed,
    )
    _, edited = pipeline.edit(person, pose, mask, args.caption, texture, guidance)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(edited, out)
    save_mask(mask, out.with_suffix(".mask.png"))
    sidecar = {
        "image": str(args.image),
        "garment_name": args.garment_name,
        "texture": str(args.texture),
        "caption": args.caption,
        "checkpoint": str(args.checkpoint),
        "lambda": guidance.lambda_texture,
        "steps": guidance.ddim_steps,
        "guidance": guidance.guidance_scale,
        "seed": guidance.seed,
        "mask_backend": args.mask_backend,
        "dilation_radius": cfg.locator.dilation_radius,
        "pose": str(pose_path) if pose_path.exists() else None,
        "out": str(out),
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    if args.print_config:
        return _print_config(cfg)
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.manifest).exists():
        raise ConfigError(f"manifest not found: {args.manifest}")
    guidance = GuidanceConfig(
        guidance_scale=cfg.sampler.guidance_scale,
        lambda_texture=cfg.sampler.lambda_texture,
        ddim_steps=cfg.sampler.ddim_steps,
        seed=args.seed,
    )
    clip_backend = None
    if cfg.evaluator.clip_backend == "encoder":
        pipeline = EditPipeline.from_checkpoint(args.checkpoint)
        clip_backend = EncoderClipBackend(pipeline.texture_encoder, tag=Path(args.checkpoint).name)
    else:
        clip_backend = StubClipBackend(seed=cfg.evaluator.feature_seed)
    report = evaluate_manifest(
        args.manifest,
        args.checkpoint,
        guidance,
        out_dir=args.report_out,
        clip_backend=clip_backend,
        feature_backbone=FilterBankBackbone(seed=cfg.evaluator.feature_seed),
        dilation_radius=cfg.locator.dilation_radius,
    )
    print(report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texedit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="generate synthetic samples or ingest a try-on layout")
    p.add_argument("--mode", choices=["synthetic", "viton"], required=True)
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--root", help="layout root (viton mode)")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--captioner", choices=["stub", "url"], default="stub")
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage1-checkpoint")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="edit one image")
    p.add_argument("--image", required=True)
    p.add_argument("--garment-name", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--caption", default="")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    # sampler defaults (lambda 1.0, 30 steps, guidance 5.0, seed 42) live in
    # the config schema; explicit flags win over the config file
    p.add_argument("--lambda", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mask-backend", choices=["oracle", "url", "file"], default="oracle")
    p.add_argument("--mask")
    p.add_argument("--pose")
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="run metrics over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report-out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    import torch

    torch.set_num_threads(1)  # tiny tensors: thread fan-out only adds overhead
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RegionNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_REGION
    except TransportError as err:
        print(f"transport error: {err}", file=sys.stderr)
        return EXIT_TRANSPORT
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TexEditError, RuntimeError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
