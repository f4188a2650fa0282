"""Segment-recurrent transformer acoustic model.

Each utterance is processed chunk by chunk.  Encoder and decoder self-attention
see the current chunk plus a detached cache of earlier chunks' layer inputs;
encoder-decoder attention only sees the current chunk's encoder output.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .attention import (AttentionLayerParams, AttentionParams, PositionalEncoding,
                        build_causal_mask, scaled_positional_encoding, sinusoid_table,
                        transformer_layer)
from .chunker import Segment, split_points, symbol_class
from .memory import CachedMemory
from .numerics import (Tensor, add, bce_with_logits, dropout, embedding, linear, mean, mul,
                       no_grad, parameter, relu, square, sub, tabs)

log = logging.getLogger(__name__)


class SegmentationError(ValueError):
    """A segment is longer than the model's positional tables."""


@dataclass
class ModelConfig:
    n_symbols: int = 16
    n_sentence_types: int = 3
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_model: int = 64
    d_ff: int = 256
    d_prenet: int = 64
    n_heads_self: int = 4
    n_heads_encdec: int = 2
    n_mels: int = 16
    chunk_size: int = 8
    search_window: int = 3
    enc_mem_capacity: int = 16
    dec_mem_capacity: int = 4
    l_max: int = 192
    dropout: float = 0.0
    prenet_dropout: float = 0.5
    reduction_factor: int = 1
    stop_pos_weight: float = 5.0
    w_mel: float = 1.0
    w_stop: float = 1.0
    w_chunk_stop: float = 1.0
    w_rate: float = 10.0
    w_guided: float = 0.0       # diagonal prior on cross-attention; 0 disables
    guided_sigma: float = 0.2
    stop_rule: str = "selector"
    stop_threshold: float = 0.5
    max_frames_per_segment: int = 160
    use_pe: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads_self or self.d_model % self.n_heads_encdec:
            raise ValueError("d_model must be divisible by the head counts")
        if self.stop_rule not in ("selector", "literal"):
            raise ValueError(f"stop_rule must be 'selector' or 'literal', not {self.stop_rule!r}")
        if self.reduction_factor != 1:
            raise ValueError("only reduction_factor = 1 is supported")
        if self.max_frames_per_segment > self.l_max:
            raise ValueError("max_frames_per_segment must not exceed l_max")
        if self.chunk_size + self.search_window > self.l_max:
            raise ValueError("chunk_size + search_window must not exceed l_max")

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(n_layers_enc=6, n_layers_dec=6, d_model=512, d_ff=2048, d_prenet=256,
                    n_heads_self=8, n_heads_encdec=4, n_mels=80, chunk_size=60,
                    search_window=20, enc_mem_capacity=120, dec_mem_capacity=4, l_max=1536,
                    max_frames_per_segment=1200, dropout=0.1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(f"unknown model config key {k!r}")
            kwargs[k] = v
        return cls(**kwargs)


# ---------------------------------------------------------------------- params
def _xavier(rng, out_dim, in_dim):
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class STransformerParams:
    """Flat name -> Tensor store with structured views."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.tensors.items()}

    def copy(self) -> "STransformerParams":
        return STransformerParams({k: parameter(t.data, k) for k, t in self.tensors.items()},
                                  self.config)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "STransformerParams":
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        t: dict[str, np.ndarray] = {}

        def lin(name, out_dim, in_dim, bias=True):
            t[f"{name}.w"] = _xavier(rng, out_dim, in_dim)
            if bias:
                t[f"{name}.b"] = np.zeros(out_dim)

        def attn(name, heads, mem):
            for m in ("q", "k", "v", "o"):
                t[f"{name}.w_{m}"] = _xavier(rng, d, d)
            if mem > 0:
                t[f"{name}.b_rel"] = np.zeros((heads, c.l_max, mem))

        def norm(name):
            t[f"{name}.g"] = np.ones(d)
            t[f"{name}.b"] = np.zeros(d)

        t["embed"] = rng.normal(0.0, 1.0, size=(c.n_symbols, d))
        lin("enc_prenet.0", d, d)
        lin("enc_prenet.1", d, d)
        lin("sent_prenet.0", d, c.n_sentence_types)
        lin("sent_prenet.1", d, d)
        lin("dec_prenet.0", c.d_prenet, c.n_mels)
        lin("dec_prenet.1", c.d_prenet, c.d_prenet)
        lin("dec_prenet.proj", d, c.d_prenet)
        for side, n_layers, mem in (("enc", c.n_layers_enc, c.enc_mem_capacity),
                                    ("dec", c.n_layers_dec, c.dec_mem_capacity)):
            for i in range(n_layers):
                p = f"{side}.{i}"
                attn(f"{p}.attn", c.n_heads_self, mem)
                norm(f"{p}.ln1")
                lin(f"{p}.ffn.0", c.d_ff, d)
                lin(f"{p}.ffn.1", d, c.d_ff)
                norm(f"{p}.ln2")
                if side == "dec":
                    attn(f"{p}.cross", c.n_heads_encdec, 0)
                    norm(f"{p}.lnc")
        lin("mel_out", c.n_mels, d)
        lin("stop_utt", 1, d)
        lin("stop_chunk", 1, d)
        lin("rate_head", 1, d)
        lin("rate_proj", d, 1)
        t["alpha_enc"] = np.ones(1)
        t["alpha_dec"] = np.ones(1)
        return cls({k: parameter(v, k) for k, v in t.items()}, config)

    # views -------------------------------------------------------------------
    def _attn(self, name: str, heads: int) -> AttentionParams:
        g = self.tensors
        return AttentionParams(g[f"{name}.w_q"], g[f"{name}.w_k"], g[f"{name}.w_v"],
                               g[f"{name}.w_o"], heads, g.get(f"{name}.b_rel"))

    def layer(self, side: str, i: int) -> AttentionLayerParams:
        g = self.tensors
        p = f"{side}.{i}"
        lp = AttentionLayerParams(
            attn=self._attn(f"{p}.attn", self.config.n_heads_self),
            ln1_g=g[f"{p}.ln1.g"], ln1_b=g[f"{p}.ln1.b"],
            ffn_w1=g[f"{p}.ffn.0.w"], ffn_b1=g[f"{p}.ffn.0.b"],
            ffn_w2=g[f"{p}.ffn.1.w"], ffn_b2=g[f"{p}.ffn.1.b"],
            ln2_g=g[f"{p}.ln2.g"], ln2_b=g[f"{p}.ln2.b"])
        if side == "dec":
            lp.cross = self._attn(f"{p}.cross", self.config.n_heads_encdec)
            lp.lnc_g, lp.lnc_b = g[f"{p}.lnc.g"], g[f"{p}.lnc.b"]
        return lp


# --------------------------------------------------------------------- outputs
@dataclass
class EncoderOutput:
    out: Tensor               # [l, d] after rate injection
    pre_injection: Tensor     # [l, d]
    rate_pred: Tensor         # scalar, shape (1,)
    rate_used: float
    self_attn: list[Tensor] = field(default_factory=list)
    layer_inputs: list[Tensor] = field(default_factory=list)


@dataclass
class DecoderOutput:
    mel: Tensor                 # [l', n_mels]
    stop_logits: Tensor         # [l'] utterance-stop head
    chunk_stop_logits: Tensor   # [l'] chunk-stop head
    cross_attn: list[Tensor]    # per layer, [n_heads_encdec, l', l]
    self_attn: list[Tensor]
    layer_inputs: list[Tensor]


@dataclass
class LossComponents:
    total: Tensor
    mel_l1: float
    mel_l2: float
    stop: float
    chunk_stop: float
    rate: float
    guided: float = 0.0

    def as_row(self) -> dict[str, float]:
        return {"total": self.total.item(), "mel": self.mel_l1 + self.mel_l2,
                "mel_l2": self.mel_l2, "stop": self.stop, "chunk_stop": self.chunk_stop,
                "rate": self.rate, "guided": self.guided}


def stop_logit(chunk_logit, utt_logit, utt_end: int, rule: str = "selector"):
    """Combine the two stop heads for one frame (or an array of frames).

    ``selector`` reads the chunk head inside an utterance and the utterance
    head on its final segment.  ``literal`` multiplies both heads by
    (1 - utt_end), which is identically zero on final segments.
    """
    if utt_end not in (0, 1):
        raise ValueError("utt_end must be 0 or 1")
    if rule == "literal":
        return chunk_logit * (1 - utt_end) + utt_logit * (1 - utt_end)
    if rule == "selector":
        return chunk_logit * (1 - utt_end) + utt_logit * utt_end
    raise ValueError(f"unknown stop rule {rule!r}")


def decoder_inputs(mel: np.ndarray, prev_frame: np.ndarray | None) -> np.ndarray:
    """Shift right by one frame; frame 0 is ``prev_frame`` or the zero go-frame."""
    go = np.zeros((1, mel.shape[1])) if prev_frame is None else np.asarray(prev_frame)[None]
    return np.concatenate([go, mel[:-1]], axis=0)


def guided_attention_penalty(cross_attn: Sequence[Tensor], sigma: float) -> Tensor:
    """Mean attention mass far from the segment diagonal, over layers and heads.

    Weight 1 - exp(-(n/N - t/T)^2 / (2 sigma^2)) for decoder frame t of T and
    encoder position n of N.
    """
    _, T, N = cross_attn[0].shape
    t = (np.arange(T) + 0.5)[:, None] / T
    n = (np.arange(N) + 0.5)[None, :] / N
    w = 1.0 - np.exp(-((n - t) ** 2) / (2.0 * sigma ** 2))
    terms = [mean(mul(a, w[None])) for a in cross_attn]
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(terms))


def _sigmoid(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x))) if x >= 0 else float(np.exp(x) / (1.0 + np.exp(x)))


@dataclass
class SynthesisResult:
    mel: np.ndarray
    cross_attn: list[np.ndarray]
    boundaries: list[tuple[int, int]]      # frame span per segment
    phone_spans: list[tuple[int, int]]
    rates: list[float]
    warnings: list[str]
    peak_attention_entries: int


class STransformer:
    def __init__(self, config: ModelConfig, params: STransformerParams | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else STransformerParams.init(config, seed)
        self.enc_pe = PositionalEncoding(sinusoid_table(config.l_max, config.d_model),
                                         self.params["alpha_enc"])
        self.dec_pe = PositionalEncoding(sinusoid_table(config.l_max, config.d_model),
                                         self.params["alpha_dec"])
        self.break_stop_gradient = False

    # ------------------------------------------------------------------ caches
    def new_caches(self) -> tuple[CachedMemory, CachedMemory]:
        c = self.config
        detach = not self.break_stop_gradient
        return (CachedMemory(c.n_layers_enc, c.enc_mem_capacity, c.d_model, detach),
                CachedMemory(c.n_layers_dec, c.dec_mem_capacity, c.d_model, detach))

    def _lin(self, x: Tensor, name: str) -> Tensor:
        g = self.params.tensors
        return linear(x, g[f"{name}.w"], g.get(f"{name}.b"))

    # ----------------------------------------------------------------- encoder
    def encode_segment(self, phoneme_ids, sentence_feature_id: int, rate: float | None,
                       cache: CachedMemory) -> EncoderOutput:
        """Encode one chunk; pushes this chunk's layer inputs into ``cache``.

        ``rate=None`` injects the predicted speaking rate (inference).
        """
        c = self.config
        ids = np.asarray(phoneme_ids, dtype=np.int64)
        length = len(ids)
        if length == 0:
            raise SegmentationError("empty segment")
        if length > c.l_max:
            raise SegmentationError(f"segment of {length} phonemes exceeds l_max={c.l_max}")
        x = embedding(self.params["embed"], ids)
        x = self._lin(relu(self._lin(x, "enc_prenet.0")), "enc_prenet.1")
        onehot = np.zeros((1, c.n_sentence_types))
        onehot[0, sentence_feature_id] = 1.0
        sent = self._lin(relu(self._lin(Tensor(onehot), "sent_prenet.0")), "sent_prenet.1")
        h = add(x, relu(sent))
        if c.use_pe:
            h = add(h, scaled_positional_encoding(length, self.enc_pe))
        inputs, attn = [], []
        for i in range(c.n_layers_enc):
            inputs.append(h)
            h, w = transformer_layer(h, cache.view(i), self.params.layer("enc", i))
            attn.append(w["self"])
        cache.push(inputs)
        rate_pred = self.predict_speaking_rate(h)
        used = float(rate_pred.data[0]) if rate is None else float(rate)
        out = add(h, self._lin(Tensor([[used]]), "rate_proj"))
        return EncoderOutput(out, h, rate_pred, used, attn, inputs)

    def predict_speaking_rate(self, enc_pre: Tensor) -> Tensor:
        """Mean over positions of the per-position rate head."""
        return mean(self._lin(enc_pre, "rate_head"), axis=0)

    # ----------------------------------------------------------------- decoder
    def _decoder_stack(self, dec_in: np.ndarray, enc_out: Tensor, cache: CachedMemory,
                       rng: np.random.Generator | None, training: bool) -> DecoderOutput:
        c = self.config
        n = dec_in.shape[0]
        if enc_out.shape[0] == 0:
            raise ValueError("empty encoder output")
        if n > c.l_max:
            raise SegmentationError(f"segment of {n} frames exceeds l_max={c.l_max}")
        x = Tensor(dec_in)
        x = dropout(relu(self._lin(x, "dec_prenet.0")), c.prenet_dropout, rng, training)
        x = dropout(relu(self._lin(x, "dec_prenet.1")), c.prenet_dropout, rng, training)
        h = self._lin(x, "dec_prenet.proj")
        if c.use_pe:
            h = add(h, scaled_positional_encoding(n, self.dec_pe))
        drop = (lambda t: dropout(t, c.dropout, rng, training)) if training else None
        inputs, cross, selfw = [], [], []
        for i in range(c.n_layers_dec):
            inputs.append(h)
            mem = cache.view(i)
            mask = build_causal_mask(n, mem.shape[0])
            h, w = transformer_layer(h, mem, self.params.layer("dec", i), mask, enc_out, drop)
            cross.append(w["cross"])
            selfw.append(w["self"])
        mel = self._lin(h, "mel_out")
        stop = self._lin(h, "stop_utt")[:, 0]
        chunk = self._lin(h, "stop_chunk")[:, 0]
        return DecoderOutput(mel, stop, chunk, cross, selfw, inputs)

    def decode_segment_teacher_forced(self, dec_in: np.ndarray, enc_out: Tensor,
                                      cache: CachedMemory,
                                      rng: np.random.Generator | None = None,
                                      training: bool = False) -> DecoderOutput:
        """Decode right-shifted ground truth ``dec_in`` [l', n_mels]; pushes the cache."""
        out = self._decoder_stack(np.asarray(dec_in, dtype=np.float64), enc_out, cache, rng,
                                  training)
        cache.push(out.layer_inputs)
        return out

    # -------------------------------------------------------------------- loss
    def segment_loss(self, enc: EncoderOutput, dec: DecoderOutput, seg: Segment) -> LossComponents:
        c = self.config
        target = Tensor(seg.mel)
        diff = sub(dec.mel, target)
        l1 = mean(tabs(diff))
        l2 = mean(square(diff))
        n = seg.mel.shape[0]
        utt_t = np.zeros(n)
        if seg.is_last:
            utt_t[-1] = 1.0
        chunk_t = np.zeros(n)
        chunk_t[-1] = 1.0
        stop = bce_with_logits(dec.stop_logits, utt_t, c.stop_pos_weight)
        chunk = bce_with_logits(dec.chunk_stop_logits, chunk_t, c.stop_pos_weight)
        rate = square(sub(enc.rate_pred, seg.rate))
        total = add(add(mul(add(l1, l2), c.w_mel), mul(stop, c.w_stop)),
                    add(mul(chunk, c.w_chunk_stop), mul(rate.sum(), c.w_rate)))
        guided = 0.0
        if c.w_guided > 0:
            g = guided_attention_penalty(dec.cross_attn, c.guided_sigma)
            total = add(total, mul(g, c.w_guided))
            guided = g.item()
        return LossComponents(total, l1.item(), l2.item(), stop.item(), chunk.item(),
                              rate.item(), guided)

    def forward_segment(self, seg: Segment, prev_frame: np.ndarray | None,
                        enc_cache: CachedMemory, dec_cache: CachedMemory,
                        rng: np.random.Generator | None = None, training: bool = False):
        """Teacher-forced encode + decode + loss for one segment."""
        enc = self.encode_segment(seg.phoneme_ids, seg.sentence_feature_id, seg.rate, enc_cache)
        dec = self.decode_segment_teacher_forced(decoder_inputs(seg.mel, prev_frame), enc.out,
                                                 dec_cache, rng, training)
        return enc, dec, self.segment_loss(enc, dec, seg)

    # --------------------------------------------------------------- synthesis
    def synthesize(self, phoneme_ids: Sequence[int], sentence_feature_id: int = 0,
                   symbols: Sequence[str] | None = None) -> SynthesisResult:
        """Chunk the input like training data and decode segment by segment."""
        c = self.config
        ids = np.asarray(phoneme_ids, dtype=np.int64)
        if len(ids) == 0:
            return SynthesisResult(np.zeros((0, c.n_mels)), [], [], [], [], [], 0)
        if symbols is None:
            classes = ["phone"] * len(ids)
        else:
            classes = [symbol_class(s) for s in symbols]
        spans = split_points(classes, c.chunk_size, c.search_window)
        enc_cache, dec_cache = self.new_caches()
        mels, attns, bounds, rates, warnings = [], [], [], [], []
        prev = None
        frame = 0
        peak = 0
        with no_grad():
            for si, (start, end, _) in enumerate(spans):
                utt_end = int(si == len(spans) - 1)
                enc_mem = len(enc_cache)
                enc = self.encode_segment(ids[start:end], sentence_feature_id, None, enc_cache)
                rates.append(enc.rate_used)
                seg_mel, last_out, seg_peak = self._decode_free(enc.out, dec_cache, prev, utt_end)
                peak = max(peak, seg_peak, (end - start) * (end - start + enc_mem))
                n = seg_mel.shape[0]
                if n >= c.max_frames_per_segment and not last_out["stopped"]:
                    msg = f"segment {si}: frame cap {c.max_frames_per_segment} reached"
                    log.warning(msg)
                    warnings.append(msg)
                dec_cache.push(last_out["dec"].layer_inputs)
                attns.append(last_out["dec"].cross_attn[-1].data.copy())
                mels.append(seg_mel)
                bounds.append((frame, frame + n))
                frame += n
                prev = seg_mel[-1]
        return SynthesisResult(np.concatenate(mels, axis=0), attns, bounds,
                               [(s, e) for s, e, _ in spans], rates, warnings, peak)

    def _decode_free(self, enc_out: Tensor, cache: CachedMemory, prev: np.ndarray | None,
                     utt_end: int):
        c = self.config
        frames = [np.zeros(c.n_mels) if prev is None else np.asarray(prev)]
        peak = 0
        out = None
        stopped = False
        while len(frames) - 1 < c.max_frames_per_segment:
            dec_in = np.stack(frames)
            out = self._decoder_stack(dec_in, enc_out, cache, None, False)
            n, mem = dec_in.shape[0], cache.view(0).shape[0] if cache.n_layers else 0
            peak = max(peak, n * (n + mem))
            frames.append(out.mel.data[-1].copy())
            z = stop_logit(out.chunk_stop_logits.data[-1], out.stop_logits.data[-1], utt_end,
                           c.stop_rule)
            if _sigmoid(z) > c.stop_threshold:
                stopped = True
                break
        return np.stack(frames[1:]), {"dec": out, "stopped": stopped}, peak
