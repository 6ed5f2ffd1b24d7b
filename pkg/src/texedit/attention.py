"""Scaled dot-product attention and the two conditioning variants.

All three operations are plain tensor functions so the same math is shared
by the network modules, the gradient checks, and the oracle tests.  Inputs
may carry arbitrary leading batch dimensions; the token axis is -2 and the
feature axis is -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ShapeError


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q @ k.transpose(-1, -2)) * scale
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    # [..., L, H*dh] -> [..., H, L, dh]
    *lead, length, dim = x.shape
    if dim % n_heads:
        raise ShapeError(f"feature dim {dim} not divisible by {n_heads} heads")
    return x.reshape(*lead, length, n_heads, dim // n_heads).transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., H, L, dh] -> [..., L, H*dh]
    y = x.transpose(-2, -3)
    *lead, length, n_heads, dh = y.shape
    return y.reshape(*lead, length, n_heads * dh)


def multi_head_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int
) -> torch.Tensor:
    """Split the feature dim into heads, attend per head, concatenate."""
    if n_heads == 1:
        return attention(q, k, v)
    out = attention(_split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads))
    return _merge_heads(out)


@dataclass
class AttentionWeights:
    """Projection matrices for the decoupled cross-attention pair.

    w_q: [d_model, d]; the four k/v matrices: [d_cond, d].  The text branch
    uses w_k/w_v, the texture-image branch w_k_img/w_v_img.
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_k_img: torch.Tensor
    w_v_img: torch.Tensor


def decoupled_cross_attention(
    f_hidden: torch.Tensor,
    c_text: torch.Tensor,
    c_image: torch.Tensor | None,
    weights: AttentionWeights,
    lam: float,
    n_heads: int = 1,
) -> torch.Tensor:
    """Text cross-attention plus lam-scaled image cross-attention, shared queries.

    With lam == 0 or no image tokens the image branch is omitted entirely and
    the result is exactly the text-only attention output.
    """
    q = f_hidden @ weights.w_q
    out = multi_head_attention(q, c_text @ weights.w_k, c_text @ weights.w_v, n_heads)
    if c_image is None or lam == 0.0 or c_image.shape[-2] == 0:
        return out
    img = multi_head_attention(q, c_image @ weights.w_k_img, c_image @ weights.w_v_img, n_heads)
    return out + lam * img


def fused_self_attention(
    f_i: torch.Tensor,
    f_c: torch.Tensor | None,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    n_heads: int = 1,
) -> torch.Tensor:
    """Self-attention whose keys/values also cover concatenated detail tokens.

    q = f_i w_q, k = [f_i; f_c] w_k, v = [f_i; f_c] w_v.  An empty or missing
    f_c reduces to plain self-attention over f_i, bit-exactly.
    """
    if f_c is not None and f_c.shape[-2] > 0:
        if f_c.shape[-1] != f_i.shape[-1]:
            raise ShapeError(
                f"detail feature dim {f_c.shape[-1]} != hidden feature dim {f_i.shape[-1]}"
            )
        kv_src = torch.cat([f_i, f_c], dim=-2)
    else:
        kv_src = f_i
    return multi_head_attention(f_i @ w_q, kv_src @ w_k, kv_src @ w_v, n_heads)
