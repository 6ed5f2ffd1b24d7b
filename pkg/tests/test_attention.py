import numpy as np
import pytest
import torch

from texedit.attention import (
    AttentionWeights,
    attention,
    decoupled_cross_attention,
    fused_self_attention,
    multi_head_attention,
)
from texedit.errors import ShapeError

from oracles import attention_loop, finite_difference_grad, multi_head_attention_loop


def _rand(shape, seed, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype)


def _weights(d_model, d_cond, d, seed):
    return AttentionWeights(
        w_q=_rand((d_model, d), seed),
        w_k=_rand((d_cond, d), seed + 1),
        w_v=_rand((d_cond, d), seed + 2),
        w_k_img=_rand((d_cond, d), seed + 3),
        w_v_img=_rand((d_cond, d), seed + 4),
    )


# --- basic attention -------------------------------------------------------


def test_single_key_returns_value_row():
    q = _rand((1, 4), 0)
    k = _rand((1, 4), 1)
    v = _rand((1, 6), 2)
    out = attention(q, k, v)
    assert torch.allclose(out, v, atol=1e-12)


def test_zero_query_gives_column_mean():
    k = _rand((5, 4), 3)
    v = _rand((5, 4), 4)
    out = attention(torch.zeros(2, 4, dtype=torch.float64), k, v)
    expected = v.mean(dim=0).expand(2, 4)
    assert torch.allclose(out, expected, atol=1e-12)


def test_attention_matches_scalar_loop():
    q, k, v = _rand((3, 4), 5), _rand((5, 4), 6), _rand((5, 4), 7)
    out = attention(q, k, v)
    expected = attention_loop(q.numpy(), k.numpy(), v.numpy())
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)


def test_attention_rows_sum_to_one():
    q, k = _rand((6, 8), 8), _rand((9, 8), 9)
    logits = (q @ k.T) / np.sqrt(8)
    weights = torch.softmax(logits, dim=-1)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-6)


def test_attention_dim_mismatch():
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4))
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 4), torch.zeros(3, 4), torch.zeros(2, 4))


def test_multi_head_matches_per_head_loop():
    q, k, v = _rand((4, 8), 10), _rand((6, 8), 11), _rand((6, 8), 12)
    out = multi_head_attention(q, k, v, n_heads=2)
    expected = multi_head_attention_loop(q.numpy(), k.numpy(), v.numpy(), 2)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)


def test_attention_batched_matches_unbatched():
    q, k, v = _rand((2, 3, 4), 13), _rand((2, 5, 4), 14), _rand((2, 5, 4), 15)
    out = attention(q, k, v)
    for b in range(2):
        assert torch.allclose(out[b], attention(q[b], k[b], v[b]), atol=1e-12)


# --- decoupled cross-attention ---------------------------------------------


def test_lambda_zero_reverts_to_text_branch_bit_exact():
    w = _weights(6, 5, 4, 20)
    f = _rand((3, 6), 16)
    c_t = _rand((7, 5), 17)
    c_i = _rand((4, 5), 18)
    out = decoupled_cross_attention(f, c_t, c_i, w, lam=0.0)
    text_only = multi_head_attention(f @ w.w_q, c_t @ w.w_k, c_t @ w.w_v, 1)
    assert torch.equal(out, text_only)


def test_shared_embeddings_double_output():
    w = _weights(6, 5, 4, 21)
    w = AttentionWeights(w.w_q, w.w_k, w.w_v, w.w_k, w.w_v)  # shared branch weights
    f = _rand((3, 6), 19)
    c = _rand((7, 5), 22)
    out = decoupled_cross_attention(f, c, c, w, lam=1.0)
    single = decoupled_cross_attention(f, c, None, w, lam=0.0)
    assert torch.allclose(out, 2.0 * single, atol=1e-10)


def test_decoupled_matches_two_oracle_attentions():
    w = _weights(6, 5, 4, 23)
    f = _rand((3, 6), 24)
    c_t = _rand((7, 5), 25)
    c_i = _rand((4, 5), 26)
    out = decoupled_cross_attention(f, c_t, c_i, w, lam=0.7)
    q = (f @ w.w_q).numpy()
    text = attention_loop(q, (c_t @ w.w_k).numpy(), (c_t @ w.w_v).numpy())
    img = attention_loop(q, (c_i @ w.w_k_img).numpy(), (c_i @ w.w_v_img).numpy())
    np.testing.assert_allclose(out.numpy(), text + 0.7 * img, atol=1e-6)


def test_decoupled_linear_in_lambda():
    w = _weights(6, 5, 4, 27)
    f = _rand((3, 6), 28)
    c_t = _rand((7, 5), 29)
    c_i = _rand((4, 5), 30)
    z0 = decoupled_cross_attention(f, c_t, c_i, w, lam=0.0)
    z1 = decoupled_cross_attention(f, c_t, c_i, w, lam=1.0)
    for lam in (0.25, 0.5, 2.0):
        z = decoupled_cross_attention(f, c_t, c_i, w, lam=lam)
        assert torch.allclose(z, z0 + lam * (z1 - z0), atol=1e-10)


# --- fused self-attention ---------------------------------------------------


def test_fused_empty_details_equals_plain_bit_exact():
    wq, wk, wv = _rand((6, 4), 31), _rand((6, 4), 32), _rand((6, 4), 33)
    f = _rand((5, 6), 34)
    plain = multi_head_attention(f @ wq, f @ wk, f @ wv, 1)
    for f_c in (None, torch.zeros(0, 6, dtype=torch.float64)):
        out = fused_self_attention(f, f_c, wq, wk, wv)
        assert torch.equal(out, plain)


def test_fused_duplicate_details_equals_plain():
    # duplicating every key/value row splits softmax mass evenly and leaves
    # the weighted sum over identical value rows unchanged
    wq, wk, wv = _rand((6, 4), 35), _rand((6, 4), 36), _rand((6, 4), 37)
    f = _rand((5, 6), 38)
    out = fused_self_attention(f, f.clone(), wq, wk, wv)
    plain = multi_head_attention(f @ wq, f @ wk, f @ wv, 1)
    assert torch.allclose(out, plain, atol=1e-10)


def test_fused_matches_concat_oracle():
    wq, wk, wv = _rand((6, 4), 39), _rand((6, 4), 40), _rand((6, 4), 41)
    f_i = _rand((6, 6), 42)
    f_c = _rand((4, 6), 43)
    out = fused_self_attention(f_i, f_c, wq, wk, wv)
    kv = torch.cat([f_i, f_c], dim=0)
    expected = attention_loop((f_i @ wq).numpy(), (kv @ wk).numpy(), (kv @ wv).numpy())
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)


def test_fused_feature_dim_mismatch():
    with pytest.raises(ShapeError):
        fused_self_attention(
            torch.zeros(3, 6), torch.zeros(2, 5), torch.zeros(6, 4), torch.zeros(6, 4), torch.zeros(6, 4)
        )


# --- gradient checks --------------------------------------------------------

FD_STEP = 1e-4
REL_TOL = 1e-3


def _check_grads(fn, tensors):
    """Compare autograd gradients against central finite differences."""
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(*leaves)
    out.backward()
    for i, leaf in enumerate(leaves):
        def scalar_fn(x, idx=i):
            args = [l.detach() for l in leaves]
            args[idx] = x
            return fn(*args)

        fd = finite_difference_grad(scalar_fn, leaf, step=FD_STEP)
        denom = max(float(fd.norm()), float(leaf.grad.norm()), 1e-12)
        rel = float((leaf.grad - fd).norm()) / denom
        assert rel < REL_TOL, f"tensor {i}: relative grad error {rel:.2e}"


def test_attention_gradients_match_finite_differences():
    q, k, v = _rand((4, 3), 50), _rand((4, 3), 51), _rand((4, 3), 52)
    probe = _rand((4, 3), 53)

    def fn(q_, k_, v_):
        return (attention(q_, k_, v_) * probe).sum()

    _check_grads(fn, [q, k, v])


def test_decoupled_gradients_match_finite_differences():
    f = _rand((4, 5), 54)
    c_t = _rand((4, 3), 55)
    c_i = _rand((4, 3), 56)
    w = _weights(5, 3, 4, 57)
    probe = _rand((4, 4), 58)

    def fn(f_, c_t_, c_i_, wq, wk, wv, wki, wvi):
        weights = AttentionWeights(wq, wk, wv, wki, wvi)
        return (decoupled_cross_attention(f_, c_t_, c_i_, weights, lam=0.7) * probe).sum()

    _check_grads(fn, [f, c_t, c_i, w.w_q, w.w_k, w.w_v, w.w_k_img, w.w_v_img])


def test_fused_gradients_match_finite_differences():
    f_i = _rand((4, 5), 59)
    f_c = _rand((4, 5), 60)
    wq, wk, wv = _rand((5, 4), 61), _rand((5, 4), 62), _rand((5, 4), 63)
    probe = _rand((4, 4), 64)

    def fn(f_i_, f_c_, wq_, wk_, wv_):
        return (fused_self_attention(f_i_, f_c_, wq_, wk_, wv_) * probe).sum()

    _check_grads(fn, [f_i, f_c, wq, wk, wv])
