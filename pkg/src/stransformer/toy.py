"""Synthetic aligned corpus with known durations, plus alignment diagnostics."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .chunker import AlignedUtterance, segment_utterance
from .corpus import MANIFEST_NAME, format_record, write_mel

FINAL_PUNCT = (".", "?", "!")  # indexed by sentence type


@dataclass
class ToySpec:
    vocab_size: int = 8
    n_mels: int = 16
    dur_min: int = 3
    dur_max: int = 8
    noise: float = 0.02
    min_symbols: int = 6
    max_symbols: int = 20
    word_boundary_rate: float = 0.25
    punctuation_rate: float = 0.08
    n_sentence_types: int = 3
    tilt: float = 0.5
    tilt_frames: int = 3
    jitter: int = 0
    seed: int = 1234

    def __post_init__(self):
        if self.dur_min < 1 or self.dur_max < self.dur_min:
            raise ValueError("durations must satisfy 1 <= dur_min <= dur_max")
        if self.n_sentence_types > len(FINAL_PUNCT):
            raise ValueError(f"at most {len(FINAL_PUNCT)} sentence types")


@dataclass
class ToyInventory:
    """Symbols with their fixed durations and spectral templates."""

    symbols: list[str]
    durations: dict[str, int]
    templates: dict[str, np.ndarray]
    phones: list[str] = field(default_factory=list)

    def template_matrix(self, symbols: Sequence[str]) -> np.ndarray:
        return np.stack([self.templates[s] for s in symbols])


def make_inventory(spec: ToySpec) -> ToyInventory:
    rng = np.random.default_rng([spec.seed, 0])
    phones = [chr(ord("a") + i) for i in range(spec.vocab_size)]
    symbols = phones + ["/", ","] + list(FINAL_PUNCT[: spec.n_sentence_types])
    while True:
        templates = rng.normal(0.0, 1.0, size=(len(symbols), spec.n_mels))
        d = np.linalg.norm(templates[:, None] - templates[None], axis=-1)
        d[np.diag_indices(len(symbols))] = np.inf
        if d.min() > 10 * spec.noise:
            break
    durations = rng.integers(spec.dur_min, spec.dur_max + 1, size=len(symbols))
    return ToyInventory(symbols, {s: int(n) for s, n in zip(symbols, durations)},
                        {s: t for s, t in zip(symbols, templates)}, phones)


def make_symbols(spec: ToySpec, inv: ToyInventory, rng: np.random.Generator,
                 n_phones: int, sentence_type: int) -> list[str]:
    out: list[str] = []
    prev = None
    for i in range(n_phones):
        choices = [p for p in inv.phones if p != prev]
        ph = choices[rng.integers(len(choices))]
        out.append(ph)
        prev = ph
        if i < n_phones - 1:
            r = rng.random()
            if r < spec.punctuation_rate:
                out.append(",")
            elif r < spec.punctuation_rate + spec.word_boundary_rate:
                out.append("/")
    out.append(FINAL_PUNCT[sentence_type])
    return out


def render(spec: ToySpec, inv: ToyInventory, symbols: Sequence[str], sentence_type: int,
           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Mel frames and per-symbol durations for a symbol sequence."""
    durs = np.array([inv.durations[s] for s in symbols], dtype=np.int64)
    if spec.jitter:
        durs = np.maximum(1, durs + rng.integers(-spec.jitter, spec.jitter + 1, size=len(durs)))
    mel = np.repeat(inv.template_matrix(symbols), durs, axis=0)
    if spec.noise > 0:
        mel = mel + spec.noise * rng.normal(size=mel.shape)
    # sentence type leaves a spectral tilt on the final frames
    k = min(spec.tilt_frames, mel.shape[0])
    centered = sentence_type - (spec.n_sentence_types - 1) / 2.0
    mel[-k:] += spec.tilt * centered * np.linspace(-1.0, 1.0, spec.n_mels)
    return mel, durs


def generate_utterances(spec: ToySpec, n_utts: int, length_scale: float = 1.0,
                        start: int = 0) -> list[AlignedUtterance]:
    """Utterances ``start .. start + n_utts - 1``; each index has its own seed."""
    inv = make_inventory(spec)
    utts = []
    for i in range(start, start + n_utts):
        rng = np.random.default_rng([spec.seed, 1, i])
        lo = int(round(spec.min_symbols * length_scale))
        hi = int(round(spec.max_symbols * length_scale))
        n_phones = int(rng.integers(lo, hi + 1))
        stype = int(rng.integers(spec.n_sentence_types))
        syms = make_symbols(spec, inv, rng, n_phones, stype)
        mel, durs = render(spec, inv, syms, stype, rng)
        utts.append(AlignedUtterance(f"utt{i:05d}", syms, durs, mel, stype))
    return utts


@dataclass
class CorpusStats:
    n_utts: int
    n_segments: int
    n_frames: int
    mean_rate: float

    def lines(self) -> list[str]:
        return [f"utterances {self.n_utts}", f"segments {self.n_segments}",
                f"frames {self.n_frames}", f"mean_chunk_rate {self.mean_rate:.12f}"]


def corpus_stats(utts: Sequence[AlignedUtterance], chunk_size: int, window: int) -> CorpusStats:
    rates = []
    for u in utts:
        rates.extend(s.rate for s in segment_utterance(u, chunk_size, window))
    return CorpusStats(len(utts), len(rates), int(sum(u.mel.shape[0] for u in utts)),
                       float(np.mean(rates)) if rates else 0.0)


def gen_corpus(spec: ToySpec, n_utts: int, out_dir: str | os.PathLike) -> list[AlignedUtterance]:
    """Write ``manifest.txt`` and ``mels/*.mel`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    utts = generate_utterances(spec, n_utts)
    lines = []
    for u in utts:
        rel = f"mels/{u.utt_id}.mel"
        write_mel(out / rel, u.mel)
        # the stored corpus is float32; keep the in-memory copy identical
        u.mel = u.mel.astype(np.float32).astype(np.float64)
        lines.append(format_record(u.utt_id, u.symbols, u.durations, u.sentence_feature_id, rel))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return utts


# ------------------------------------------------------------------ diagnostics
@dataclass
class AlignmentReport:
    centroids: np.ndarray
    monotonicity: float
    durations: np.ndarray        # frames attributed to each encoder position
    duration_errors: np.ndarray  # durations - ground truth


def eval_alignment(cross_attn: Sequence[np.ndarray], true_durations: Sequence[Sequence[int]],
                   tolerance: float = 0.5) -> AlignmentReport:
    """Attention-centroid monotonicity and per-symbol durations from attention argmax.

    ``cross_attn`` holds one [n_heads, l', l] (or [l', l]) array per segment;
    heads are averaged.  Encoder positions are offset by the preceding
    segments' lengths so centroids form one utterance-level track.
    """
    centroids, durations = [], []
    offset = 0
    for attn, gt in zip(cross_attn, true_durations):
        a = np.asarray(attn)
        if a.ndim == 3:
            a = a.mean(axis=0)
        pos = np.arange(a.shape[1]) + offset
        centroids.append(a @ pos)
        durations.append(np.bincount(a.argmax(axis=1), minlength=a.shape[1]))
        offset += a.shape[1]
    c = np.concatenate(centroids) if centroids else np.zeros(0)
    steps = np.diff(c)
    mono = 1.0 if steps.size == 0 else float(np.mean(steps >= -tolerance))
    d = np.concatenate(durations) if durations else np.zeros(0, dtype=np.int64)
    gt_all = np.concatenate([np.asarray(g) for g in true_durations]) if true_durations else d
    return AlignmentReport(c, mono, d, d - gt_all)


def forced_durations(mel: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Frames per symbol from a monotonic best-fit of ``mel`` to a template sequence.

    Each symbol receives at least one frame; the cost is squared distance to
    the symbol's template.  Requires len(mel) >= len(templates).
    """
    T, N = mel.shape[0], templates.shape[0]
    if T < N:
        raise ValueError(f"cannot align {T} frames to {N} symbols")
    cost = ((mel[:, None, :] - templates[None]) ** 2).sum(axis=-1)  # [T, N]
    acc = np.full((T, N), np.inf)
    back = np.zeros((T, N), dtype=bool)  # True: advanced to a new symbol at t
    acc[0, 0] = cost[0, 0]
    for t in range(1, T):
        stay = acc[t - 1]
        move = np.concatenate([[np.inf], acc[t - 1, :-1]])
        back[t] = move < stay
        acc[t] = np.minimum(stay, move) + cost[t]
    durs = np.zeros(N, dtype=np.int64)
    j = N - 1
    for t in range(T - 1, -1, -1):
        durs[j] += 1
        if back[t, j]:
            j -= 1
    return durs
