"""Noise schedule, forward process, CFG combination and the DDIM sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError


class NoiseSchedule:
    """Cumulative alpha-bar schedule over T steps.

    alpha_bar has length T+1 with alpha_bar[0] = 1 and alpha_bar[T] close to
    zero, strictly decreasing in between.  Squashing betas at 0.999 keeps the
    terminal value positive so the x0-prediction divide stays finite.
    """

    def __init__(self, num_steps: int, alpha_bar: np.ndarray):
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.shape != (num_steps + 1,):
            raise ShapeError(f"alpha_bar must have length T+1={num_steps + 1}")
        if abs(alpha_bar[0] - 1.0) > 1e-12:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if alpha_bar[-1] < 0 or alpha_bar[-1] > 1e-2:
            raise ValueError("alpha_bar[T] must be approximately 0")
        self.num_steps = num_steps
        self.alpha_bar = alpha_bar

    @classmethod
    def cosine(cls, num_steps: int = 1000, offset: float = 0.008) -> "NoiseSchedule":
        t = np.arange(num_steps + 1, dtype=np.float64)
        f = np.cos((t / num_steps + offset) / (1 + offset) * math.pi / 2.0) ** 2
        betas = 1.0 - f[1:] / f[:-1]
        betas = np.clip(betas, 0.0, 0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(num_steps, alpha_bar)

    def sqrt_ab(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_ab(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])


@dataclass
class GuidanceConfig:
    guidance_scale: float = 5.0
    lambda_texture: float = 1.0
    ddim_steps: int = 30
    seed: int = 42

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.lambda_texture < 0:
            raise ValueError("lambda_texture must be >= 0")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")


def forward_noise(
    z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if not 0 <= t <= schedule.num_steps:
        raise ValueError(f"t={t} outside schedule range [0, {schedule.num_steps}]")
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    return schedule.sqrt_ab(t) * z0 + schedule.sqrt_one_minus_ab(t) * eps


def training_pair(
    z0: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator
) -> tuple[int, torch.Tensor, torch.Tensor]:
    """Draw (t, z_t, eps) for one training example: t uniform on {1..T}, eps ~ N(0, I)."""
    t = int(torch.randint(1, schedule.num_steps + 1, (1,), generator=generator).item())
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    return t, forward_noise(z0, t, eps, schedule), eps


def cfg_combine(
    eps_uncond: torch.Tensor, eps_cond: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Classifier-free guidance: uncond + alpha * (cond - uncond).

    alpha in {0, 1} short-circuits to the corresponding branch so those
    identities hold exactly; agreeing branches return unchanged for any
    alpha since the extrapolation term is exactly zero.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError("guidance branch shapes differ")
    if alpha == 0.0:
        return eps_uncond
    if alpha == 1.0:
        return eps_cond
    return eps_uncond + alpha * (eps_cond - eps_uncond)


def ddim_timesteps(num_steps: int, ddim_steps: int) -> list[int]:
    """Evenly spaced decreasing subsequence of {1..T}, starting at T."""
    if ddim_steps > num_steps:
        raise ValueError(f"ddim_steps={ddim_steps} exceeds schedule T={num_steps}")
    ts = np.round(np.linspace(num_steps, 1, ddim_steps)).astype(int)
    if np.any(np.diff(ts) >= 0):
        raise ValueError("timestep subsequence not strictly decreasing")
    return [int(t) for t in ts]


X0_CLAMP = 3.0  # keeps undertrained predictors from diverging during sampling


def ddim_sample(
    model,
    init: torch.Tensor,
    conditions,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM trajectory with classifier-free guidance.

    `model(z_t, t, conditions)` must return the predicted noise;
    `conditions.unconditional()` must return the null-condition variant.
    Every step invokes the model on both branches and combines them with
    cfg_combine at cfg.guidance_scale.
    """
    uncond = conditions.unconditional()
    ts = ddim_timesteps(schedule.num_steps, cfg.ddim_steps)
    z = init
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_u = model(z, t, uncond)
        eps_c = model(z, t, conditions)
        eps = cfg_combine(eps_u, eps_c, cfg.guidance_scale)
        x0_hat = (z - schedule.sqrt_one_minus_ab(t) * eps) / schedule.sqrt_ab(t)
        x0_hat = x0_hat.clamp(-X0_CLAMP, X0_CLAMP)
        z = schedule.sqrt_ab(t_prev) * x0_hat + schedule.sqrt_one_minus_ab(t_prev) * eps
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"non-finite latent at sampler step {i} (t={t})")
    return z
