"""Behavioral measurements of a trained model on aligned utterances."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chunker import AlignedUtterance, segment_utterance
from .model import STransformer
from .numerics import no_grad
from .toy import ToyInventory, eval_alignment, forced_durations


def teacher_forced_mel_l2(model: STransformer, utts: Sequence[AlignedUtterance],
                          vocab: dict[str, int]) -> float:
    """Frame-weighted mean squared mel error, segments decoded in order with caches."""
    c = model.config
    se, n = 0.0, 0
    with no_grad():
        for u in utts:
            enc_c, dec_c = model.new_caches()
            prev = None
            for seg in segment_utterance(u, c.chunk_size, c.search_window, vocab):
                _, dec, _ = model.forward_segment(seg, prev, enc_c, dec_c)
                se += float(((dec.mel.data - seg.mel) ** 2).sum())
                n += seg.mel.size
                prev = seg.mel[-1]
    return se / max(n, 1)


def rate_errors(model: STransformer, utts: Sequence[AlignedUtterance],
                vocab: dict[str, int]) -> np.ndarray:
    """Relative error of the predicted chunk speaking rate per segment."""
    c = model.config
    errs = []
    with no_grad():
        for u in utts:
            enc_c, _ = model.new_caches()
            for seg in segment_utterance(u, c.chunk_size, c.search_window, vocab):
                enc = model.encode_segment(seg.phoneme_ids, seg.sentence_feature_id, None, enc_c)
                errs.append(enc.rate_used / seg.rate - 1.0)
    return np.asarray(errs)


@dataclass
class FreeRunReport:
    n_symbols: int = 0
    duration_ok: int = 0
    n_segments: int = 0
    stop_ok: int = 0
    monotonicity: list[float] = field(default_factory=list)
    attn_duration_ok: int = 0
    cap_warnings: int = 0
    duration_rel_errors: list[float] = field(default_factory=list)
    segment_length_errors: list[int] = field(default_factory=list)

    @property
    def duration_accuracy(self) -> float:
        return self.duration_ok / max(self.n_symbols, 1)

    @property
    def stop_accuracy(self) -> float:
        return self.stop_ok / max(self.n_segments, 1)

    @property
    def mean_monotonicity(self) -> float:
        return float(np.mean(self.monotonicity)) if self.monotonicity else 1.0

    @property
    def attn_duration_accuracy(self) -> float:
        return self.attn_duration_ok / max(self.n_symbols, 1)


def free_running_report(model: STransformer, utts: Sequence[AlignedUtterance],
                        vocab: dict[str, int], inventory: ToyInventory,
                        duration_tol: float = 0.2, stop_tol: int = 2) -> FreeRunReport:
    """Synthesize each utterance and compare against its ground-truth alignment.

    Emitted per-symbol durations come from a monotonic best fit of the
    synthesized frames to the known symbol templates.
    """
    c = model.config
    rep = FreeRunReport()
    for u in utts:
        ids = [vocab[s] for s in u.symbols]
        res = model.synthesize(ids, u.sentence_feature_id, u.symbols)
        rep.cap_warnings += len(res.warnings)
        gt_segs = segment_utterance(u, c.chunk_size, c.search_window, vocab)
        for seg, (f0, f1) in zip(gt_segs, res.boundaries):
            err = (f1 - f0) - seg.mel.shape[0]
            rep.segment_length_errors.append(err)
            rep.n_segments += 1
            rep.stop_ok += abs(err) <= stop_tol
        gt = u.durations
        if res.mel.shape[0] >= len(u.symbols):
            emitted = forced_durations(res.mel, inventory.template_matrix(u.symbols))
        else:
            emitted = np.zeros(len(u.symbols), dtype=np.int64)
        rel = np.abs(emitted - gt) / gt
        rep.duration_rel_errors.extend(rel.tolist())
        rep.duration_ok += int(np.sum(rel <= duration_tol + 1e-12))
        rep.n_symbols += len(gt)
        spans_gt = [u.durations[s:e] for s, e in res.phone_spans]
        al = eval_alignment(res.cross_attn, spans_gt)
        rep.monotonicity.append(al.monotonicity)
        rep.attn_duration_ok += int(np.sum(np.abs(al.duration_errors) / gt <= duration_tol + 1e-12))
    return rep
