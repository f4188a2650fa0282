"""Multi-head attention over memory-extended context with a trainable memory bias.

Column order is fixed project-wide: memory columns first, then the current
segment.  Masks are additive float arrays of shape [L, M + L] holding 0 or
-inf.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import (ShapeError, Tensor, add, concat, layer_norm, linear, matmul, mul, relu,
                       reshape, softmax_lastdim, transpose)

NEG_INF = -np.inf


class ConfigurationError(ValueError):
    """A length exceeds a configured table size."""


@dataclass
class AttentionParams:
    """One multi-head attention block (projections stored as [out, in])."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    b_rel: Tensor | None = None  # [n_heads, L_max, M_max]


@dataclass
class AttentionLayerParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    # decoder layers only
    cross: AttentionParams | None = None
    lnc_g: Tensor | None = None
    lnc_b: Tensor | None = None


@dataclass
class PositionalEncoding:
    table: np.ndarray  # [L_max, d_model]
    alpha: Tensor      # trainable scalar, shape (1,)


def sinusoid_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d_model // 2]
    return table


def scaled_positional_encoding(length: int, pe: PositionalEncoding, offset: int = 0) -> Tensor:
    """alpha * sinusoid for segment-internal positions offset..offset+length-1."""
    if offset + length > pe.table.shape[0]:
        raise ConfigurationError(f"segment length {offset + length} exceeds positional table "
                                 f"size {pe.table.shape[0]}")
    return mul(Tensor(pe.table[offset:offset + length]), pe.alpha)


def build_causal_mask(length: int, mem_len: int) -> np.ndarray:
    """Row t may see every memory column and current columns 0..t."""
    mask = np.zeros((length, mem_len + length))
    mask[:, mem_len:][np.triu_indices(length, k=1)] = NEG_INF
    return mask


def build_padding_mask(valid_len: int, length: int, mem_len: int) -> np.ndarray:
    if valid_len > length:
        raise ValueError(f"valid_len {valid_len} > length {length}")
    mask = np.zeros((length, mem_len + length))
    mask[:, mem_len + valid_len:] = NEG_INF
    return mask


def extend_context(mem: Tensor, cur: Tensor) -> Tensor:
    """Concatenate memory (oldest first) and current states along time."""
    if mem.shape[-1] != cur.shape[-1]:
        raise ShapeError(f"extend_context: memory width {mem.shape} vs current {cur.shape}")
    if mem.shape[0] == 0:
        return cur
    return concat([mem, cur], axis=0)


def project_qkv(cur: Tensor, extended: Tensor, p: AttentionParams,
                check: bool = __debug__) -> tuple[Tensor, Tensor, Tensor]:
    """Queries from the current segment only; keys and values from the extended context."""
    if check:
        L = cur.shape[0]
        if extended.shape[0] < L or not np.array_equal(extended.data[-L:], cur.data):
            raise ValueError("project_qkv: extended context must end with the current segment")
    return linear(cur, p.w_q), linear(extended, p.w_k), linear(extended, p.w_v)


def rel_bias_slice(b_rel: Tensor | None, length: int, mem_len: int) -> Tensor | None:
    """Rows 0..L-1 and the *last* M memory columns of the bias table.

    Memory is filled from its recent end, so column j of a partially filled
    memory keeps the same distance-to-present as in a full one.
    """
    if b_rel is None or mem_len == 0:
        return None
    _, l_max, m_max = b_rel.shape
    if length > l_max or mem_len > m_max:
        raise ConfigurationError(f"relative bias table {b_rel.shape[1:]} too small for "
                                 f"L={length}, M={mem_len}")
    return b_rel[:, :length, m_max - mem_len:]


def relative_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, w_o: Tensor,
                       b_rel_slice: Tensor | None = None,
                       mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(QK^T / sqrt(d_head) + [B_rel ; B_cur]) V, output-projected.

    Returns (output [L, d], attention weights [n_heads, L, M + L]).
    """
    L, d = q.shape
    total = k.shape[0]
    if d % n_heads:
        raise ShapeError(f"d_model {d} not divisible by n_heads {n_heads}")
    dh = d // n_heads
    qh = transpose(reshape(q, (L, n_heads, dh)), (1, 0, 2))
    kt = transpose(reshape(k, (total, n_heads, dh)), (1, 2, 0))
    vh = transpose(reshape(v, (total, n_heads, dh)), (1, 0, 2))
    logits = mul(matmul(qh, kt), 1.0 / np.sqrt(dh))
    if b_rel_slice is not None:
        mem_len = b_rel_slice.shape[-1]
        zeros = Tensor(np.zeros((n_heads, L, total - mem_len)))
        logits = add(logits, concat([b_rel_slice, zeros], axis=-1))
    if mask is not None:
        logits = add(logits, mask)
    weights = softmax_lastdim(logits)
    ctx = reshape(transpose(matmul(weights, vh), (1, 0, 2)), (L, d))
    return linear(ctx, w_o), weights


def segment_attention(cur: Tensor, mem: Tensor | None, p: AttentionParams,
                      mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Self-attention of ``cur`` over [mem ; cur]."""
    extended = cur if mem is None else extend_context(mem, cur)
    mem_len = extended.shape[0] - cur.shape[0]
    q, k, v = project_qkv(cur, extended, p, check=False)
    bias = rel_bias_slice(p.b_rel, cur.shape[0], mem_len)
    return relative_attention(q, k, v, p.n_heads, p.w_o, bias, mask)


def cross_attention(cur: Tensor, source: Tensor, p: AttentionParams,
                    mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    q, k, v = linear(cur, p.w_q), linear(source, p.w_k), linear(source, p.w_v)
    return relative_attention(q, k, v, p.n_heads, p.w_o, None, mask)


def feed_forward(x: Tensor, p: AttentionLayerParams) -> Tensor:
    return linear(relu(linear(x, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2)


def transformer_layer(cur: Tensor, mem: Tensor | None, p: AttentionLayerParams,
                      mask: np.ndarray | None = None, source: Tensor | None = None,
                      drop: Callable[[Tensor], Tensor] | None = None,
                      eps: float = 1e-5) -> tuple[Tensor, dict[str, Tensor]]:
    """Post-norm layer: self-attention, [cross-attention], feed-forward.

    Returns the output and the attention weights keyed ``self`` / ``cross``.
    """
    drop = drop or (lambda t: t)
    attn_out, self_w = segment_attention(cur, mem, p.attn, mask)
    h = layer_norm(add(cur, drop(attn_out)), p.ln1_g, p.ln1_b, eps)
    weights = {"self": self_w}
    if p.cross is not None:
        if source is None or source.shape[0] == 0:
            raise ValueError("decoder layer needs a non-empty encoder output")
        cross_out, cross_w = cross_attention(h, source, p.cross)
        h = layer_norm(add(h, drop(cross_out)), p.lnc_g, p.lnc_b, eps)
        weights["cross"] = cross_w
    h = layer_norm(add(h, drop(feed_forward(h, p))), p.ln2_g, p.ln2_b, eps)
    return h, weights
