"""Plain-numpy standard transformer TTS forward, written independently of the autodiff path.

Per-head loops and explicit formulas; no memory, no relative bias.  Used as
the oracle for the reduction and concatenation checks.
"""
from __future__ import annotations

import numpy as np


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def mha(xq: np.ndarray, xkv: np.ndarray, wq, wk, wv, wo, n_heads: int,
        mask: np.ndarray | None = None, bias: np.ndarray | None = None) -> np.ndarray:
    """Multi-head attention; ``mask`` [Lq, Lk] and ``bias`` [H, Lq, Lk] are additive."""
    q, k, v = xq @ wq.T, xkv @ wk.T, xkv @ wv.T
    dh = q.shape[1] // n_heads
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if bias is not None:
            logits = logits + bias[h]
        if mask is not None:
            logits = logits + mask
        heads.append(softmax(logits) @ v[:, sl])
    return np.concatenate(heads, axis=1) @ wo.T


def causal(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = -np.inf
    return m


def layer(x: np.ndarray, p: dict, prefix: str, n_heads: int, mask=None, source=None,
          n_heads_cross: int | None = None) -> np.ndarray:
    a = f"{prefix}.attn"
    h = norm(x + mha(x, x, p[f"{a}.w_q"], p[f"{a}.w_k"], p[f"{a}.w_v"], p[f"{a}.w_o"],
                     n_heads, mask), p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    if source is not None:
        c = f"{prefix}.cross"
        h = norm(h + mha(h, source, p[f"{c}.w_q"], p[f"{c}.w_k"], p[f"{c}.w_v"], p[f"{c}.w_o"],
                         n_heads_cross), p[f"{prefix}.lnc.g"], p[f"{prefix}.lnc.b"])
    ff = np.maximum(h @ p[f"{prefix}.ffn.0.w"].T + p[f"{prefix}.ffn.0.b"], 0.0)
    ff = ff @ p[f"{prefix}.ffn.1.w"].T + p[f"{prefix}.ffn.1.b"]
    return norm(h + ff, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def dense(x, p, name, act=False):
    y = x @ p[f"{name}.w"].T + p[f"{name}.b"]
    return np.maximum(y, 0.0) if act else y


def sinusoids(n: int, d: int) -> np.ndarray:
    out = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            angle = pos / 10000.0 ** (i / d)
            out[pos, i] = np.sin(angle)
            if i + 1 < d:
                out[pos, i + 1] = np.cos(angle)
    return out


def tts_forward(p: dict[str, np.ndarray], cfg, ids, sentence_id: int, rate: float | None,
                dec_in: np.ndarray) -> dict[str, np.ndarray]:
    """Whole-utterance transformer TTS forward (encoder, teacher-forced decoder, heads)."""
    d = cfg.d_model
    x = p["embed"][np.asarray(ids)]
    x = dense(dense(x, p, "enc_prenet.0", act=True), p, "enc_prenet.1")
    onehot = np.zeros((1, cfg.n_sentence_types))
    onehot[0, sentence_id] = 1.0
    x = x + dense(dense(onehot, p, "sent_prenet.0", act=True), p, "sent_prenet.1", act=True)
    if cfg.use_pe:
        x = x + p["alpha_enc"] * sinusoids(len(ids), d)
    for i in range(cfg.n_layers_enc):
        x = layer(x, p, f"enc.{i}", cfg.n_heads_self)
    rate_pred = float((x @ p["rate_head.w"].T + p["rate_head.b"]).mean())
    used = rate_pred if rate is None else rate
    enc = x + (np.array([[used]]) @ p["rate_proj.w"].T + p["rate_proj.b"])

    y = dense(dense(dec_in, p, "dec_prenet.0", act=True), p, "dec_prenet.1", act=True)
    y = dense(y, p, "dec_prenet.proj")
    if cfg.use_pe:
        y = y + p["alpha_dec"] * sinusoids(len(dec_in), d)
    for i in range(cfg.n_layers_dec):
        y = layer(y, p, f"dec.{i}", cfg.n_heads_self, causal(len(dec_in)), enc,
                  cfg.n_heads_encdec)
    return {"enc_out": enc, "rate_pred": np.array([rate_pred]),
            "mel": dense(y, p, "mel_out"),
            "stop_logits": dense(y, p, "stop_utt")[:, 0],
            "chunk_stop_logits": dense(y, p, "stop_chunk")[:, 0]}
