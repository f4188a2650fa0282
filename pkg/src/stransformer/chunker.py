"""Order chunk reader: boundary search segmentation and utterance-ordered batching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

PUNCTUATION = frozenset(",.?!;:")
WORD_BOUNDARY = frozenset({"/"})
DELIMITER = frozenset({"-", "~"})


class DegenerateSegmentError(ValueError):
    """A segment has no mel frames."""


def symbol_class(sym: str) -> str:
    if sym in PUNCTUATION:
        return "punctuation"
    if sym in WORD_BOUNDARY:
        return "word-boundary"
    if sym in DELIMITER:
        return "delimiter"
    return "phone"


@dataclass
class AlignedUtterance:
    utt_id: str
    symbols: list[str]
    durations: np.ndarray
    mel: np.ndarray
    sentence_feature_id: int = 0
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.mel = np.asarray(self.mel)
        if not self.classes:
            self.classes = [symbol_class(s) for s in self.symbols]
        if len(self.durations) != len(self.symbols):
            raise ValueError(f"{self.utt_id}: {len(self.symbols)} symbols but "
                             f"{len(self.durations)} durations")
        if np.any(self.durations < 0):
            raise ValueError(f"{self.utt_id}: negative duration")
        if int(self.durations.sum()) != self.mel.shape[0]:
            raise ValueError(f"{self.utt_id}: durations sum to {int(self.durations.sum())} but "
                             f"mel has {self.mel.shape[0]} frames")


@dataclass
class Segment:
    utt_id: str
    index: int
    symbols: list[str]
    phoneme_ids: np.ndarray
    durations: np.ndarray
    mel: np.ndarray
    is_first: bool
    is_last: bool
    sentence_feature_id: int = 0
    boundary_kind: str = "hard"
    phone_start: int = 0
    frame_start: int = 0

    @property
    def utt_end(self) -> int:
        return int(self.is_last)

    @property
    def rate(self) -> float:
        return chunk_speaking_rate(self)


def chunk_speaking_rate(seg: Segment) -> float:
    """Phonemes per mel frame in the chunk."""
    n_frames = seg.mel.shape[0]
    if n_frames == 0:
        raise DegenerateSegmentError(f"{seg.utt_id}[{seg.index}]: zero-frame segment")
    return len(seg.symbols) / n_frames


_PRIORITY = {"punctuation": 0, "word-boundary": 1}


def choose_boundary(classes: Sequence[str], cursor: int, chunk_size: int,
                    window: int) -> tuple[int, str]:
    """Length of the next segment starting at ``cursor`` and why it ends there.

    Candidate lengths k lie in [chunk_size - window, chunk_size + window]; the
    k-th symbol closes the segment.  Punctuation beats word boundaries beats a
    hard cut at k = chunk_size; ties go to the candidate nearest chunk_size,
    then the shorter one.
    """
    remaining = len(classes) - cursor
    if remaining <= chunk_size:
        return remaining, "end"
    lo = max(1, chunk_size - window)
    hi = min(chunk_size + window, remaining - 1)
    best = None
    for k in range(lo, hi + 1):
        rank = _PRIORITY.get(classes[cursor + k - 1])
        if rank is None:
            continue
        key = (rank, abs(k - chunk_size), k)
        if best is None or key < best:
            best = key
    if best is None:
        return chunk_size, "hard"
    return best[2], classes[cursor + best[2] - 1]


def split_points(classes: Sequence[str], chunk_size: int = 60,
                 window: int = 20) -> list[tuple[int, int, str]]:
    """(start, end, kind) spans covering ``classes`` in order."""
    if not chunk_size > window > 0:
        raise ValueError(f"need chunk_size > window > 0, got {chunk_size}, {window}")
    spans = []
    cursor = 0
    while cursor < len(classes):
        k, kind = choose_boundary(classes, cursor, chunk_size, window)
        if kind == "end":
            last = classes[-1]
            kind = last if last in _PRIORITY else "hard"
        spans.append((cursor, cursor + k, kind))
        cursor += k
    return spans


def segment_utterance(u: AlignedUtterance, chunk_size: int = 60, window: int = 20,
                      vocab: Mapping[str, int] | None = None) -> list[Segment]:
    spans = split_points(u.classes, chunk_size, window)
    bounds = np.concatenate([[0], np.cumsum(u.durations)])
    # zero-frame spans are folded into their predecessor (or successor when first)
    merged: list[list] = []
    for start, end, kind in spans:
        if bounds[end] == bounds[start] and merged:
            merged[-1][1] = end
        else:
            merged.append([start, end, kind])
    if len(merged) > 1 and bounds[merged[0][1]] == bounds[merged[0][0]]:
        merged[1][0] = merged[0][0]
        merged.pop(0)

    segments = []
    for i, (start, end, kind) in enumerate(merged):
        syms = u.symbols[start:end]
        ids = (np.array([vocab[s] for s in syms], dtype=np.int64) if vocab is not None
               else np.full(len(syms), -1, dtype=np.int64))
        f0, f1 = int(bounds[start]), int(bounds[end])
        segments.append(Segment(
            utt_id=u.utt_id, index=i, symbols=list(syms), phoneme_ids=ids,
            durations=u.durations[start:end].copy(), mel=u.mel[f0:f1],
            is_first=(i == 0), is_last=(i == len(merged) - 1),
            sentence_feature_id=u.sentence_feature_id, boundary_kind=kind,
            phone_start=start, frame_start=f0))
    return segments


@dataclass
class SegmentBatch:
    """One training step: a segment (or padding ``None``) per lane."""

    lanes: list[Segment | None]

    @property
    def mask(self) -> list[bool]:
        return [s is not None for s in self.lanes]

    def __len__(self) -> int:
        return len(self.lanes)


def batch_iterator(corpus: Iterable[AlignedUtterance], batch_size: int, chunk_size: int = 60,
                   window: int = 20,
                   vocab: Mapping[str, int] | None = None) -> Iterator[SegmentBatch]:
    """Utterance-ordered lanes; a lane takes the next utterance when its current one ends.

    Each lane's segments come out strictly in order, so the ``is_first`` flag on
    a segment is the cache-reset signal for that lane.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    source = iter(corpus)
    pending: list[list[Segment]] = [[] for _ in range(batch_size)]

    def refill(lane: int) -> None:
        while not pending[lane]:
            u = next(source, None)
            if u is None:
                return
            pending[lane] = segment_utterance(u, chunk_size, window, vocab)

    while True:
        for lane in range(batch_size):
            refill(lane)
        if not any(pending):
            return
        yield SegmentBatch([p.pop(0) if p else None for p in pending])
