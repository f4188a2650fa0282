import math

import numpy as np
import pytest

from stransformer import reference
from stransformer.attention import (AttentionLayerParams, AttentionParams, ConfigurationError,
                                    PositionalEncoding, build_causal_mask, build_padding_mask,
                                    extend_context, project_qkv, relative_attention,
                                    scaled_positional_encoding, segment_attention, sinusoid_table,
                                    transformer_layer)
from stransformer.numerics import ShapeError, Tensor, grad_check, parameter


def make_attn(rng, d, heads, mem_max=0, l_max=16, scale=0.5):
    w = [parameter(rng.normal(scale=scale, size=(d, d)), f"w_{n}") for n in "qkvo"]
    b_rel = parameter(np.zeros((heads, l_max, mem_max)), "b_rel") if mem_max else None
    return AttentionParams(*w, n_heads=heads, b_rel=b_rel)


def make_layer(rng, d, heads, mem_max=0, d_ff=None, cross_heads=None):
    d_ff = d_ff or 4 * d

    def p(name, *shape, scale=0.3):
        return parameter(rng.normal(scale=scale, size=shape), name)

    lp = AttentionLayerParams(
        attn=make_attn(rng, d, heads, mem_max),
        ln1_g=p("ln1_g", d, scale=0.1) + 1.0, ln1_b=p("ln1_b", d, scale=0.1),
        ffn_w1=p("ffn_w1", d_ff, d), ffn_b1=p("ffn_b1", d_ff, scale=0.1),
        ffn_w2=p("ffn_w2", d, d_ff), ffn_b2=p("ffn_b2", d, scale=0.1),
        ln2_g=p("ln2_g", d, scale=0.1) + 1.0, ln2_b=p("ln2_b", d, scale=0.1))
    # keep leaves as parameters for gradient checks
    lp.ln1_g = parameter(lp.ln1_g.data, "ln1_g")
    lp.ln2_g = parameter(lp.ln2_g.data, "ln2_g")
    if cross_heads:
        lp.cross = make_attn(rng, d, cross_heads)
        lp.lnc_g = parameter(1.0 + rng.normal(scale=0.1, size=d), "lnc_g")
        lp.lnc_b = parameter(rng.normal(scale=0.1, size=d), "lnc_b")
    return lp


def layer_arrays(lp: AttentionLayerParams, prefix="L") -> dict:
    out = {f"{prefix}.attn.w_q": lp.attn.w_q.data, f"{prefix}.attn.w_k": lp.attn.w_k.data,
           f"{prefix}.attn.w_v": lp.attn.w_v.data, f"{prefix}.attn.w_o": lp.attn.w_o.data,
           f"{prefix}.ln1.g": lp.ln1_g.data, f"{prefix}.ln1.b": lp.ln1_b.data,
           f"{prefix}.ffn.0.w": lp.ffn_w1.data, f"{prefix}.ffn.0.b": lp.ffn_b1.data,
           f"{prefix}.ffn.1.w": lp.ffn_w2.data, f"{prefix}.ffn.1.b": lp.ffn_b2.data,
           f"{prefix}.ln2.g": lp.ln2_g.data, f"{prefix}.ln2.b": lp.ln2_b.data}
    if lp.cross is not None:
        out.update({f"{prefix}.cross.w_q": lp.cross.w_q.data,
                    f"{prefix}.cross.w_k": lp.cross.w_k.data,
                    f"{prefix}.cross.w_v": lp.cross.w_v.data,
                    f"{prefix}.cross.w_o": lp.cross.w_o.data,
                    f"{prefix}.lnc.g": lp.lnc_g.data, f"{prefix}.lnc.b": lp.lnc_b.data})
    return out


def layer_leaves(lp: AttentionLayerParams) -> dict:
    leaves = {"w_q": lp.attn.w_q, "w_k": lp.attn.w_k, "w_v": lp.attn.w_v, "w_o": lp.attn.w_o,
              "ln1_g": lp.ln1_g, "ln1_b": lp.ln1_b, "ffn_w1": lp.ffn_w1, "ffn_b1": lp.ffn_b1,
              "ffn_w2": lp.ffn_w2, "ffn_b2": lp.ffn_b2, "ln2_g": lp.ln2_g, "ln2_b": lp.ln2_b}
    if lp.attn.b_rel is not None:
        leaves["b_rel"] = lp.attn.b_rel
    return leaves


# ------------------------------------------------------------ extend_context
def test_extend_context_empty_memory_is_identity():
    cur = Tensor(np.ones((3, 2)))
    assert extend_context(Tensor(np.zeros((0, 2))), cur) is cur


def test_extend_context_memory_first():
    mem = Tensor(np.full((4, 2), 1.0))
    cur = Tensor(np.full((4, 2), 2.0))
    out = extend_context(mem, cur).data
    assert out.shape == (8, 2)
    assert np.all(out[:4] == 1.0) and np.all(out[4:] == 2.0)


def test_extend_context_gradient_only_into_current():
    mem = Tensor(np.ones((2, 3)))
    cur = parameter(np.ones((3, 3)), "cur")
    (extend_context(mem, cur) * np.arange(15.0).reshape(5, 3)).sum().backward()
    assert mem.grad is None
    np.testing.assert_array_equal(cur.grad, np.arange(6.0, 15.0).reshape(3, 3))


def test_extend_context_width_mismatch():
    with pytest.raises(ShapeError):
        extend_context(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# --------------------------------------------------------------- project_qkv
def test_project_qkv_identity_weights():
    eye = Tensor(np.eye(3))
    p = AttentionParams(eye, eye, eye, eye, n_heads=1)
    cur = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    q, k, v = project_qkv(cur, cur, p)
    for t in (q, k, v):
        np.testing.assert_array_equal(t.data, cur.data)


@pytest.mark.parametrize("seed", range(5))
def test_project_qkv_row_counts(seed):
    rng = np.random.default_rng(seed)
    L, M, d = rng.integers(1, 6), rng.integers(0, 6), 4
    cur = Tensor(rng.normal(size=(L, d)))
    ext = extend_context(Tensor(rng.normal(size=(M, d))), cur)
    q, k, v = project_qkv(cur, ext, make_attn(rng, d, 2))
    assert k.shape[0] - q.shape[0] == M and v.shape == k.shape == (M + L, d)


def test_project_qkv_contract_violation():
    rng = np.random.default_rng(1)
    p = make_attn(rng, 4, 2)
    with pytest.raises(ValueError, match="end with"):
        project_qkv(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(5, 4))), p, check=True)


# -------------------------------------------------------- relative_attention
def test_reduction_equals_standard_attention():
    rng = np.random.default_rng(2)
    d, H, L = 8, 2, 5
    p = make_attn(rng, d, H)
    x = rng.normal(size=(L, d))
    out, w = segment_attention(Tensor(x), None, p)
    ref = reference.mha(x, x, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, H)
    np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_bias_saturation_selects_memory_row():
    rng = np.random.default_rng(3)
    d, L, M = 4, 3, 4
    eye = Tensor(np.eye(d))
    p = AttentionParams(eye, eye, eye, eye, n_heads=1)
    mem = rng.normal(size=(M, d))
    cur = rng.normal(size=(L, d))
    q, k, v = project_qkv(Tensor(cur), Tensor(np.vstack([mem, cur])), p)
    bias = np.full((1, L, M), -1e4)
    bias[0, :, 2] = 1e4
    mask = np.zeros((L, M + L))
    mask[:, M:] = -1e4
    out, _ = relative_attention(q, k, v, 1, eye, Tensor(bias), mask)
    np.testing.assert_allclose(out.data, np.repeat(mem[2:3], L, axis=0), atol=1e-9)


def test_hand_computed_single_head():
    """L=2 queries over M=2 memory + 2 current keys, d=2, one head."""
    Q = [[1.0, 0.0], [0.5, -1.0]]
    K = [[0.2, 0.4], [1.0, 1.0], [-0.5, 0.3], [0.0, 2.0]]
    V = [[1.0, 2.0], [3.0, -1.0], [0.0, 0.5], [-2.0, 1.0]]
    B = [[0.3, -0.2], [0.1, 0.7]]
    expected = []
    for i in range(2):
        logits = [(Q[i][0] * K[j][0] + Q[i][1] * K[j][1]) / math.sqrt(2)
                  + (B[i][j] if j < 2 else 0.0) for j in range(4)]
        if i == 0:
            logits[3] = -math.inf  # causal: query 0 may not see current key 1
        ex = [math.exp(z) if z != -math.inf else 0.0 for z in logits]
        s = sum(ex)
        expected.append([sum(ex[j] / s * V[j][c] for j in range(4)) for c in range(2)])
    eye = Tensor(np.eye(2))
    out, w = relative_attention(Tensor(Q), Tensor(K), Tensor(V), 1, eye,
                                Tensor(np.array([B])), build_causal_mask(2, 2))
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-14)
    assert w.data[0, 0, 3] == 0.0


# --------------------------------------------------------- transformer_layer
def test_layer_without_memory_matches_reference():
    rng = np.random.default_rng(4)
    d, H, L = 8, 2, 6
    lp = make_layer(rng, d, H)
    x = rng.normal(size=(L, d))
    out, _ = transformer_layer(Tensor(x), None, lp)
    ref = reference.layer(x, layer_arrays(lp), "L", H)
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_decoder_layer_matches_reference():
    rng = np.random.default_rng(5)
    d, L, S = 8, 5, 3
    lp = make_layer(rng, d, 2, cross_heads=2)
    x, src = rng.normal(size=(L, d)), rng.normal(size=(S, d))
    out, w = transformer_layer(Tensor(x), None, lp, build_causal_mask(L, 0), Tensor(src))
    ref = reference.layer(x, layer_arrays(lp), "L", 2, reference.causal(L), src, 2)
    assert np.max(np.abs(out.data - ref)) < 1e-12
    assert w["cross"].shape == (2, L, S)
    np.testing.assert_allclose(w["cross"].data.sum(-1), 1.0, atol=1e-12)


def test_zero_ffn_gives_normed_attention_output():
    rng = np.random.default_rng(6)
    d = 6
    lp = make_layer(rng, d, 2)
    for t in (lp.ffn_w1, lp.ffn_b1, lp.ffn_w2, lp.ffn_b2, lp.ln1_b, lp.ln2_b):
        t.data[...] = 0.0
    lp.ln1_g.data[...] = 1.0
    lp.ln2_g.data[...] = 1.0
    x = Tensor(rng.normal(size=(4, d)))
    out, _ = transformer_layer(x, None, lp)
    attn, _ = segment_attention(x, None, lp.attn)
    h = x.data + attn.data
    normed = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
    # a second norm of an already normalized row changes it only through eps
    np.testing.assert_allclose(out.data, normed, atol=1e-4)


def test_layer_gradcheck_with_memory_and_bias():
    rng = np.random.default_rng(7)
    d, H, L, M = 8, 2, 4, 3
    lp = make_layer(rng, d, H, mem_max=5)
    lp.attn.b_rel.data[...] = rng.normal(scale=0.5, size=lp.attn.b_rel.shape)
    x = Tensor(rng.normal(size=(L, d)))
    mem = Tensor(rng.normal(size=(M, d)))
    target = rng.normal(size=(L, d))
    mask = build_causal_mask(L, M)

    def loss():
        out, _ = transformer_layer(x, mem, lp, mask)
        return ((out - target) * (out - target)).sum()

    assert grad_check(loss, layer_leaves(lp), eps=1e-6, n_samples=None) < 1e-4


# --------------------------------------------------------- positional encoding
def test_pe_zero_scale():
    pe = PositionalEncoding(sinusoid_table(10, 6), parameter([0.0]))
    np.testing.assert_array_equal(scaled_positional_encoding(5, pe).data, np.zeros((5, 6)))


def test_pe_position_zero_closed_form():
    pe = PositionalEncoding(sinusoid_table(10, 6), parameter([2.5]))
    np.testing.assert_allclose(scaled_positional_encoding(1, pe).data[0],
                               [0, 2.5, 0, 2.5, 0, 2.5], atol=1e-15)


def test_pe_table_matches_reference_sinusoids():
    np.testing.assert_allclose(sinusoid_table(12, 8), reference.sinusoids(12, 8), atol=1e-12)


def test_pe_scale_receives_gradient():
    alpha = parameter([1.0], "alpha")
    pe = PositionalEncoding(sinusoid_table(10, 4), alpha)
    emb = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    ((emb + scaled_positional_encoding(3, pe)) * emb).sum().backward()
    assert alpha.grad is not None and abs(alpha.grad[0]) > 0


def test_pe_too_long():
    pe = PositionalEncoding(sinusoid_table(4, 4), parameter([1.0]))
    with pytest.raises(ConfigurationError):
        scaled_positional_encoding(5, pe)


# --------------------------------------------------------------------- masks
def test_causal_mask_lower_triangular():
    allowed = build_causal_mask(3, 0) == 0
    np.testing.assert_array_equal(allowed, np.tril(np.ones((3, 3), dtype=bool)))


def test_causal_mask_with_memory_row_zero():
    m = build_causal_mask(2, 3)
    assert np.all(m[0, :4] == 0) and np.isneginf(m[0, 4])
    assert np.all(m[1] == 0)


def test_padding_mask_full_length_is_zero():
    assert np.all(build_padding_mask(4, 4, 2) == 0)


def test_padding_mask_blocks_padded_columns_in_every_row():
    m = build_padding_mask(2, 4, 3)
    assert np.all(m[:, :5] == 0) and np.all(np.isneginf(m[:, 5:]))


def test_causal_invariance_to_future_frames():
    rng = np.random.default_rng(8)
    d, L, M = 8, 6, 3
    lp = make_layer(rng, d, 2, mem_max=4)
    lp.attn.b_rel.data[...] = rng.normal(size=lp.attn.b_rel.shape)
    x = rng.normal(size=(L, d))
    mem = Tensor(rng.normal(size=(M, d)))
    mask = build_causal_mask(L, M)
    base, _ = transformer_layer(Tensor(x), mem, lp, mask)
    for t in range(L - 1):
        x2 = x.copy()
        x2[t + 1:] += rng.normal(size=x2[t + 1:].shape)
        out, _ = transformer_layer(Tensor(x2), mem, lp, mask)
        np.testing.assert_array_equal(out.data[: t + 1], base.data[: t + 1])
