"""Corpus manifest and binary mel file formats.

Manifest: one utterance per line, ``|``-separated::

    utt_id | sym sym ... | dur dur ... | sentence_feature_id | mel path

Relative mel paths resolve against the manifest's directory.  A mel file is a
16-byte header of little-endian uint32 (magic, version, n_frames, n_mels)
followed by row-major little-endian float32 frames.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .chunker import AlignedUtterance

MEL_MAGIC = 0x4C454D53  # b"SMEL" read as little-endian uint32
MEL_VERSION = 1
MANIFEST_NAME = "manifest.txt"
_HEADER = struct.Struct("<4I")


class CorpusError(ValueError):
    """A manifest record or mel file could not be loaded."""

    def __init__(self, message: str, utt_id: str | None = None):
        super().__init__(f"{utt_id}: {message}" if utt_id else message)
        self.utt_id = utt_id


def write_mel(path: str | os.PathLike, mel: np.ndarray) -> None:
    mel = np.asarray(mel, dtype="<f4")
    if mel.ndim != 2:
        raise ValueError(f"mel must be 2-D, got shape {mel.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MEL_MAGIC, MEL_VERSION, mel.shape[0], mel.shape[1]))
        fh.write(np.ascontiguousarray(mel).tobytes())


def read_mel(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: truncated mel header")
    magic, version, n_frames, n_mels = _HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise CorpusError(f"{path}: bad mel magic {magic:#x}")
    if version != MEL_VERSION:
        raise CorpusError(f"{path}: unsupported mel version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n_frames * n_mels:
        raise CorpusError(f"{path}: expected {n_frames}x{n_mels} floats, "
                          f"got {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_mels).astype(np.float64)


def format_record(utt_id: str, symbols, durations, sentence_feature_id: int, mel_path: str) -> str:
    return "|".join([utt_id, " ".join(symbols), " ".join(str(int(d)) for d in durations),
                     str(int(sentence_feature_id)), mel_path])


def parse_record(line: str) -> tuple[str, list[str], list[int], int, str]:
    fields = [f.strip() for f in line.rstrip("\n").split("|")]
    utt_id = fields[0] if fields else "?"
    if len(fields) != 5:
        raise CorpusError(f"expected 5 fields, got {len(fields)}", utt_id)
    _, syms, durs, sent, mel_path = fields
    try:
        durations = [int(d) for d in durs.split()]
        sentence_id = int(sent)
    except ValueError as exc:
        raise CorpusError(f"malformed number ({exc})", utt_id) from None
    return utt_id, syms.split(), durations, sentence_id, mel_path


def manifest_path(corpus: str | os.PathLike) -> Path:
    p = Path(corpus)
    return p / MANIFEST_NAME if p.is_dir() else p


def iter_records(corpus: str | os.PathLike) -> Iterator[tuple[str, list[str], list[int], int, str]]:
    path = manifest_path(corpus)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield parse_record(line)


def load_utterance(record, root: Path) -> AlignedUtterance:
    utt_id, syms, durs, sent, mel_path = record
    full = Path(mel_path) if os.path.isabs(mel_path) else root / mel_path
    try:
        mel = read_mel(full)
    except (OSError, CorpusError) as exc:
        raise CorpusError(str(exc), utt_id) from None
    try:
        return AlignedUtterance(utt_id, syms, np.array(durs), mel, sent)
    except ValueError as exc:
        raise CorpusError(str(exc).split(": ", 1)[-1], utt_id) from None


def load_corpus(corpus: str | os.PathLike) -> list[AlignedUtterance]:
    root = manifest_path(corpus).parent
    return [load_utterance(r, root) for r in iter_records(corpus)]


def build_vocab(utterances) -> dict[str, int]:
    symbols = sorted({s for u in utterances for s in u.symbols})
    return {s: i for i, s in enumerate(symbols)}
