"""Property suites behind ``stransformer verify``.

Each check returns a CheckResult; a suite passes when all of its checks do.
The same checks back the acceptance tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import reference
from .attention import (AttentionLayerParams, AttentionParams, build_causal_mask,
                        segment_attention, transformer_layer)
from .chunker import AlignedUtterance, segment_utterance, split_points
from .memory import CachedMemory
from .model import ModelConfig, STransformer, decoder_inputs
from .numerics import Tensor, grad_check, no_grad, parameter
from .toy import ToySpec, generate_utterances


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _desk_model(seed: int = 0, **over) -> STransformer:
    cfg = ModelConfig(**{"n_symbols": 13, **over})
    return STransformer(cfg, seed=seed)


def _two_segments(model: STransformer, seed: int = 0):
    utt = generate_utterances(ToySpec(seed=seed), 1, length_scale=1.5)[0]
    vocab = {s: i for i, s in enumerate(sorted(set(utt.symbols)))}
    segs = segment_utterance(utt, model.config.chunk_size, model.config.search_window, vocab)
    return segs[0], segs[1]


# ------------------------------------------------------------------------ grad
def check_gradients(n_samples: int = 64, seed: int = 0) -> CheckResult:
    """Finite differences over a full teacher-forced segment step (second segment,
    so both caches are populated)."""
    model = _desk_model(seed)
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        t.data += rng.normal(scale=0.05, size=t.shape)  # zero-init biases get exercised too
    prev, seg = _two_segments(model, seed)
    ec, dc = model.new_caches()
    with no_grad():
        model.forward_segment(prev, None, ec, dc)

    def loss():
        return model.forward_segment(seg, prev.mel[-1], ec.copy(), dc.copy())[2].total

    t0 = time.time()
    err = grad_check(loss, dict(model.params.items()), eps=1e-5, n_samples=n_samples, seed=seed)
    dt = time.time() - t0
    return CheckResult("grad: full segment step", err < 1e-4 and dt < 60.0,
                       f"max rel err {err:.2e} over {n_samples} coords in {dt:.1f}s")


# -------------------------------------------------------------------- memory
def check_stop_gradient(break_sg: bool = False) -> CheckResult:
    """Backward on segment t+1 must put zero gradient into segment t's graph."""
    model = _desk_model(1)
    model.break_stop_gradient = break_sg
    prev, seg = _two_segments(model, 1)
    ec, dc = model.new_caches()
    enc0, dec0, _ = model.forward_segment(prev, None, ec, dc)
    watched = enc0.layer_inputs + dec0.layer_inputs
    model.params.zero_grad()
    _, _, loss = model.forward_segment(seg, prev.mel[-1], ec, dc)
    loss.total.backward()
    leak = sum(float(np.abs(t.grad).sum()) for t in watched if t.grad is not None)
    return CheckResult("memory: stop-gradient isolation", leak == 0.0,
                       f"gradient mass into previous segment {leak:.3e}")


def check_fifo(n_cases: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_cases):
        n_layers = int(rng.integers(1, 4))
        capacity = int(rng.integers(0, 10))
        cache = CachedMemory(n_layers, capacity, 2)
        ref: list[float] = []
        counter = 0
        for _ in range(int(rng.integers(1, 15))):
            if rng.random() < 0.2:
                cache.reset()
                ref = []
            else:
                k = int(rng.integers(1, 8))
                pos = np.arange(counter, counter + k, dtype=float)
                cache.push([Tensor(np.stack([pos + 1000 * i, pos], axis=1))
                            for i in range(n_layers)])
                ref = (ref + pos.tolist())[-capacity:] if capacity else []
                counter += k
            for i in range(n_layers):
                got = cache.view(i).data
                if got[:, 1].tolist() != ref or np.any(got[:, 0] - 1000 * i != got[:, 1]):
                    failures += 1
                    break
    return CheckResult("memory: FIFO + reset fuzz", failures == 0,
                       f"{failures} mismatches in {n_cases} sequences")


# -------------------------------------------------------------------- oracle
def check_reduction(seed: int = 0) -> CheckResult:
    """Zero memory, one whole-utterance segment: equals the plain reference forward."""
    model = _desk_model(seed, enc_mem_capacity=0, dec_mem_capacity=0)
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        t.data += rng.normal(scale=0.05, size=t.shape)
    ids = rng.integers(0, 13, size=11)
    dec_in = decoder_inputs(rng.normal(size=(40, model.config.n_mels)), None)
    with no_grad():
        ec, dc = model.new_caches()
        enc = model.encode_segment(ids, 1, 0.2, ec)
        dec = model.decode_segment_teacher_forced(dec_in, enc.out, dc)
    ref = reference.tts_forward({k: t.data for k, t in model.params.items()}, model.config, ids,
                                1, 0.2, dec_in)
    diff = max(float(np.max(np.abs(a.data - ref[k]))) for a, k in
               [(enc.out, "enc_out"), (dec.mel, "mel"), (dec.stop_logits, "stop_logits"),
                (dec.chunk_stop_logits, "chunk_stop_logits"), (enc.rate_pred, "rate_pred")])
    # an empty memory must be an exact no-op on the attention path
    lp = model.params.layer("dec", 0)
    x = Tensor(rng.normal(size=(6, model.config.d_model)))
    a, _ = segment_attention(x, None, lp.attn, build_causal_mask(6, 0))
    b, _ = segment_attention(x, Tensor(np.zeros((0, model.config.d_model))), lp.attn,
                             build_causal_mask(6, 0))
    exact = np.array_equal(a.data, b.data)
    return CheckResult("oracle: M=0 reduction", diff < 1e-9 and exact,
                       f"max abs diff vs reference {diff:.2e}; empty-memory path bit-exact {exact}")


def _random_layer(rng, d, heads, mem_max):
    def p(*shape, scale=0.3):
        return parameter(rng.normal(scale=scale, size=shape))

    attn = AttentionParams(p(d, d), p(d, d), p(d, d), p(d, d), heads,
                           parameter(np.zeros((heads, 32, mem_max))) if mem_max else None)
    return AttentionLayerParams(attn, 1 + p(d, scale=0.1), p(d, scale=0.1), p(2 * d, d),
                                p(2 * d, scale=0.1), p(d, 2 * d), p(d, scale=0.1),
                                1 + p(d, scale=0.1), p(d, scale=0.1))


def _layer_dict(lp):
    return {"L.attn.w_q": lp.attn.w_q.data, "L.attn.w_k": lp.attn.w_k.data,
            "L.attn.w_v": lp.attn.w_v.data, "L.attn.w_o": lp.attn.w_o.data,
            "L.ln1.g": lp.ln1_g.data, "L.ln1.b": lp.ln1_b.data,
            "L.ffn.0.w": lp.ffn_w1.data, "L.ffn.0.b": lp.ffn_b1.data,
            "L.ffn.1.w": lp.ffn_w2.data, "L.ffn.1.b": lp.ffn_b2.data,
            "L.ln2.g": lp.ln2_g.data, "L.ln2.b": lp.ln2_b.data}


def check_concatenation(n_cases: int = 100, seed: int = 0) -> CheckResult:
    """One layer over [memory; current] equals the full-sequence layer at the current rows."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(n_cases):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 5))
        L, M = int(rng.integers(1, 13)), int(rng.integers(0, 13))
        causal = case % 2 == 0
        lp = _random_layer(rng, d, heads, 16)
        x = rng.normal(size=(M + L, d))
        mask = build_causal_mask(L, M) if causal else None
        seg, _ = transformer_layer(Tensor(x[M:]), Tensor(x[:M]), lp, mask)
        full = reference.layer(x, _layer_dict(lp), "L", heads,
                               reference.causal(M + L) if causal else None)
        worst = max(worst, float(np.max(np.abs(seg.data - full[M:]))))
    return CheckResult("oracle: segment/full concatenation", worst < 1e-9,
                       f"max abs diff {worst:.2e} over {n_cases} cases")


# -------------------------------------------------------------------- causal
def check_causality(n_probes: int = 100, seed: int = 0) -> CheckResult:
    """Perturb decoder inputs from a random frame on; earlier outputs must not move."""
    model = _desk_model(seed)
    rng = np.random.default_rng(seed)
    prev, seg = _two_segments(model, seed)
    violations = 0
    with no_grad():
        ec, dc = model.new_caches()
        model.forward_segment(prev, None, ec, dc)
        enc = model.encode_segment(seg.phoneme_ids, 0, seg.rate, ec.copy())
        dec_in = decoder_inputs(seg.mel, prev.mel[-1])
        n = dec_in.shape[0]
        base = model.decode_segment_teacher_forced(dec_in, enc.out, dc.copy())
        for _ in range(n_probes):
            t = int(rng.integers(1, n))
            bumped = dec_in.copy()
            bumped[t:] += rng.normal(size=bumped[t:].shape)
            out = model.decode_segment_teacher_forced(bumped, enc.out, dc.copy())
            same = (np.array_equal(out.mel.data[:t], base.mel.data[:t])
                    and np.array_equal(out.stop_logits.data[:t], base.stop_logits.data[:t])
                    and np.array_equal(out.chunk_stop_logits.data[:t],
                                       base.chunk_stop_logits.data[:t]))
            violations += not same
    return CheckResult("causal: future-frame probes", violations == 0,
                       f"{violations} of {n_probes} probes changed earlier outputs")


def encoder_horizon(n_layers: int, mem_segments: int, seg_len: int = 4, n_segs: int = 9,
                    seed: int = 0) -> int:
    """How many segments back a phoneme change still reaches the last segment's encoder output."""
    model = _desk_model(seed, n_layers_enc=n_layers, enc_mem_capacity=mem_segments * seg_len)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 13, size=(n_segs, seg_len))

    def last_output(x):
        ec, _ = model.new_caches()
        with no_grad():
            for row in x:
                out = model.encode_segment(row, 0, 0.2, ec).out.data
        return out

    base = last_output(ids)
    horizon = 0
    for back in range(1, n_segs):
        x = ids.copy()
        x[n_segs - 1 - back] = (x[n_segs - 1 - back] + 1) % 13
        if not np.array_equal(last_output(x), base):
            horizon = back
    return horizon


def check_receptive_field() -> CheckResult:
    grid = {(n, m): encoder_horizon(n, m) for n in (1, 2, 3) for m in (0, 1, 2)}
    mono = all(grid[(n, m)] <= grid[(n + 1, m)] for n in (1, 2) for m in (0, 1, 2)) and \
        all(grid[(n, m)] <= grid[(n, m + 1)] for n in (1, 2, 3) for m in (0, 1))
    ok = mono and grid[(1, 0)] == 0
    table = " ".join(f"n{n}/M{m}L:{h}" for (n, m), h in grid.items())
    return CheckResult("causal: receptive-field growth", ok, table)


# ------------------------------------------------------------------- chunker
def random_classes(rng, n):
    kinds = ["phone"] * 7 + ["word-boundary", "word-boundary", "punctuation", "delimiter"]
    return [kinds[i] for i in rng.integers(len(kinds), size=n)]


def check_chunker(n_utts: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    sym = {"phone": "a", "word-boundary": "/", "punctuation": ",", "delimiter": "-"}
    violations = 0
    for i in range(n_utts):
        chunk, window = ((8, 3), (60, 20))[i % 2]
        classes = random_classes(rng, int(rng.integers(1, 12 * chunk)))
        durs = rng.integers(0, 6, size=len(classes))
        durs[0] = max(durs[0], 1)
        mel = rng.normal(size=(int(durs.sum()), 2))
        u = AlignedUtterance(f"r{i}", [sym[c] for c in classes], durs, mel)
        segs = segment_utterance(u, chunk, window)
        ok = (sum((s.symbols for s in segs), []) == u.symbols
              and np.array_equal(np.concatenate([s.mel for s in segs]), mel)
              and all(1 <= len(s.symbols) for s in segs))
        for start, end, kind in split_points(classes, chunk, window):
            ok &= end - start <= chunk + window
            remaining = len(classes) - start
            if remaining > chunk:
                lo, hi = max(1, chunk - window), min(chunk + window, remaining - 1)
                if "punctuation" in classes[start + lo - 1:start + hi]:
                    ok &= kind == "punctuation"
        violations += not ok
    return CheckResult("chunker: partition/bound/preference", violations == 0,
                       f"{violations} violating utterances of {n_utts}")


SUITES: dict[str, list[Callable[..., CheckResult]]] = {
    "grad": [check_gradients],
    "oracle": [check_reduction, check_concatenation],
    "memory": [check_stop_gradient, check_fifo],
    "causal": [check_causality, check_receptive_field],
    "chunker": [check_chunker],
}


def run_suite(name: str, break_sg: bool = False) -> list[CheckResult]:
    names = list(SUITES) if name == "all" else [name]
    results = []
    for n in names:
        for check in SUITES[n]:
            if check is check_stop_gradient:
                results.append(check(break_sg=break_sg))
            else:
                results.append(check())
    return results
