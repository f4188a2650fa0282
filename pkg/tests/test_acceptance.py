"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 9-12 share one desk-scale training run on the 200-utterance toy
corpus (module fixture, capped at 30 minutes of training).
"""
import time

import numpy as np
import pytest

from stransformer import verify
from stransformer.corpus import build_vocab, load_corpus
from stransformer.evaluate import free_running_report, rate_errors, teacher_forced_mel_l2
from stransformer.model import DecoderOutput, ModelConfig, STransformer, stop_logit
from stransformer.chunker import segment_utterance
from stransformer.numerics import no_grad
from stransformer.toy import ToySpec, gen_corpus, generate_utterances, make_inventory
from stransformer.train import TrainConfig, train

TRAIN_BUDGET_S = 30 * 60
TRAIN_CFG = TrainConfig(steps=16000, batch_size=8, lr=1e-3, warmup_steps=200, decay=0.5,
                        decay_interval=3000, checkpoint_every=10 ** 9)
# heavier rate loss and a diagonal attention prior; both picked on held-out runs
MODEL_OVERRIDES = {"w_rate": 100.0, "w_guided": 1.0}
N_HELD_OUT = 20


def check(report, number, title, passed, detail):
    report(number, title, passed, detail)
    assert passed, detail


# ------------------------------------------------------------ property criteria
def test_01_gradient_fidelity(report):
    r = verify.check_gradients(n_samples=64)
    check(report, 1, "gradient fidelity", r.passed, r.detail)


def test_02_stop_gradient_isolation(report):
    r = verify.check_stop_gradient()
    check(report, 2, "stop-gradient isolation", r.passed, r.detail)


def test_03_reduction_oracle(report):
    r = verify.check_reduction()
    check(report, 3, "reduction oracle", r.passed, r.detail)


def test_04_concatenation_oracle(report):
    r = verify.check_concatenation(n_cases=100)
    check(report, 4, "concatenation oracle", r.passed, r.detail)


def test_05_memory_fifo_reset(report):
    r = verify.check_fifo(n_cases=1000)
    check(report, 5, "memory FIFO + reset", r.passed, r.detail)


def test_06_causality(report):
    r = verify.check_causality(n_probes=100)
    check(report, 6, "causality", r.passed, r.detail)


def test_07_receptive_field(report):
    r = verify.check_receptive_field()
    check(report, 7, "receptive-field growth", r.passed, r.detail)


def test_08_chunker(report):
    r = verify.check_chunker(n_utts=1000)
    check(report, 8, "chunker", r.passed, r.detail)


# ---------------------------------------------------------------- trained model
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    spec = ToySpec()
    root = tmp_path_factory.mktemp("toy")
    gen_corpus(spec, 200, root)
    corpus = load_corpus(root)
    vocab = build_vocab(corpus)
    held = generate_utterances(spec, N_HELD_OUT, start=10_000)
    cfg = ModelConfig(n_symbols=len(vocab), n_mels=spec.n_mels, **MODEL_OVERRIDES)
    model = STransformer(cfg, seed=0)
    initial = teacher_forced_mel_l2(model, held, vocab)
    t0 = time.process_time()
    trainer = train(model, corpus, vocab, TRAIN_CFG, time_budget=TRAIN_BUDGET_S - 30)
    cpu = time.process_time() - t0
    with no_grad():
        final = teacher_forced_mel_l2(model, held, vocab)
        free = free_running_report(model, held, vocab, make_inventory(spec))
        # same measures on seen utterances, reported to show the generalization gap
        seen = free_running_report(model, corpus[:N_HELD_OUT], vocab, make_inventory(spec))
    return {"model": model, "vocab": vocab, "corpus": corpus, "held": held, "spec": spec,
            "initial": initial, "final": final, "free": free, "seen": seen, "cpu": cpu,
            "steps": trainer.adam.step}


def test_09_toy_end_to_end(report, trained):
    t = trained
    ratio = t["final"] / t["initial"]
    free = t["free"]
    ok = (t["cpu"] <= TRAIN_BUDGET_S and ratio < 0.1 and free.duration_accuracy >= 0.9
          and free.mean_monotonicity >= 0.95)
    detail = (f"{t['steps']} steps in {t['cpu'] / 60:.1f} CPU min; held-out teacher-forced L2 "
              f"{t['final']:.4f} = {ratio:.3f} of initial; durations within 20% on "
              f"{free.duration_accuracy:.3f} of symbols (attention-argmax "
              f"{free.attn_duration_accuracy:.3f}; training utterances "
              f"{t['seen'].duration_accuracy:.3f}); monotonicity {free.mean_monotonicity:.3f}")
    check(report, 9, "toy end-to-end", ok, detail)


def test_10_long_form_stability(report, trained):
    model, vocab = trained["model"], trained["vocab"]
    longest = max(len(u.symbols) for u in trained["corpus"])
    symbols: list[str] = []
    for u in trained["held"]:
        symbols += u.symbols
        if len(symbols) >= 4 * longest:
            break
    res = model.synthesize([vocab[s] for s in symbols], 0, symbols)
    c = model.config
    bound = c.l_max * (c.l_max + max(c.enc_mem_capacity, c.dec_mem_capacity))
    ok = (len(symbols) >= 4 * longest and res.mel.shape[0] > 0 and not res.warnings
          and res.peak_attention_entries <= bound)
    detail = (f"{len(symbols)} symbols (longest training {longest}), {len(res.boundaries)} "
              f"segments, {res.mel.shape[0]} frames, {len(res.warnings)} cap warnings, "
              f"peak attention entries {res.peak_attention_entries} <= {bound}")
    check(report, 10, "long-form stability", ok, detail)


def _literal_final_logits(model, utt, vocab):
    """Combined stop logits on the final segment under the literal rule."""
    c = model.config
    segs = segment_utterance(utt, c.chunk_size, c.search_window, vocab)
    ec, dc = model.new_caches()
    prev = None
    with no_grad():
        for seg in segs:
            _, dec, _ = model.forward_segment(seg, prev, ec, dc)
            prev = seg.mel[-1]
    return stop_logit(dec.chunk_stop_logits.data, dec.stop_logits.data, 1, "literal")


def test_11_stop_heads(report, trained):
    free = trained["free"]
    model = trained["model"]
    literal = _literal_final_logits(model, trained["held"][0], trained["vocab"])
    literal_zero = bool(np.all(literal == 0.0))
    ok = free.stop_accuracy >= 0.9 and literal_zero
    errs = np.abs(free.segment_length_errors)
    detail = (f"selector rule stops within 2 frames on {free.stop_accuracy:.3f} of "
              f"{free.n_segments} held-out segments (median |err| {np.median(errs):.0f}; training "
              f"utterances {trained['seen'].stop_accuracy:.3f}); literal rule "
              f"final-segment logits all zero: {literal_zero}")
    check(report, 11, "stop heads", ok, detail)


def test_12_speaking_rate(report, trained):
    errs = rate_errors(trained["model"], trained["held"], trained["vocab"])
    seen = rate_errors(trained["model"], trained["corpus"], trained["vocab"])
    frac = float(np.mean(np.abs(errs) <= 0.10))
    ok = frac == 1.0
    detail = (f"{frac:.3f} of {len(errs)} held-out chunks within 10%; max rel err "
              f"{np.max(np.abs(errs)):.3f}, median {np.median(np.abs(errs)):.3f} (training chunks: "
              f"max {np.max(np.abs(seen)):.3f})")
    check(report, 12, "speaking-rate head", ok, detail)
