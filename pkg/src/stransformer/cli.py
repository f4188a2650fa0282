"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 unwritable output,
3 non-finite training loss, 4 unknown input symbol.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as runcfg
from .corpus import CorpusError, build_vocab, load_corpus, write_mel
from .model import SegmentationError, STransformer
from .numerics import TrainingDivergenceError
from .toy import corpus_stats, gen_corpus
from .train import Bundle, load_bundle, save_bundle, train

EXIT_OK, EXIT_VERIFY, EXIT_UNWRITABLE, EXIT_DIVERGED, EXIT_SYMBOL = 0, 1, 2, 3, 4

log = logging.getLogger("stransformer")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {path}: {exc.strerror or exc}", EXIT_UNWRITABLE) from None
    return path


def _load_config(path) -> runcfg.RunConfig:
    try:
        return runcfg.load(path)
    except runcfg.ConfigError as exc:
        raise CliError(f"config: {exc}", EXIT_VERIFY) from None


# -------------------------------------------------------------------- commands
def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args.config)
    out = _writable_dir(Path(args.out))
    utts = gen_corpus(cfg.toy, cfg.n_utts, out)
    stats = corpus_stats(utts, cfg.model.chunk_size, cfg.model.search_window)
    for line in stats.lines():
        print(line)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    _writable_dir(out.parent if str(out.parent) else Path("."))
    try:
        corpus = load_corpus(args.corpus)
    except (OSError, CorpusError) as exc:
        raise CliError(f"corpus: {exc}", EXIT_VERIFY) from None
    if not corpus:
        raise CliError("corpus is empty", EXIT_VERIFY)
    adam = None
    if args.resume:
        bundle = load_bundle(args.resume)
        model, vocab, adam = bundle.model, bundle.vocab, bundle.adam
    else:
        vocab = build_vocab(corpus)
        model = STransformer(cfg.model_for(len(vocab), corpus[0].mel.shape[1]), seed=cfg.seed)
    log_path = cfg.log or f"{out}.csv"
    try:
        trainer = train(model, corpus, vocab, cfg.train, out_path=out, log_path=log_path,
                        adam=adam)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_DIVERGED
    except SegmentationError as exc:
        raise CliError(f"corpus does not fit the model config: {exc}", EXIT_VERIFY) from None
    if not out.exists():
        save_bundle(out, Bundle(model, vocab, trainer.adam, cfg.train))
    print(f"trained to step {trainer.adam.step}; checkpoint {out}; log {log_path}")
    return EXIT_OK


def _read_text(path: Path, vocab: dict[str, int]):
    """Yield (line number, symbols, sentence type) per non-blank line."""
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        body, _, tag = line.partition("|")
        symbols = body.split()
        if not symbols:
            continue
        for tok in symbols:
            if tok not in vocab:
                raise CliError(f"{path}:{lineno}: unknown symbol {tok!r}", EXIT_SYMBOL)
        try:
            stype = int(tag) if tag.strip() else 0
        except ValueError:
            raise CliError(f"{path}:{lineno}: bad sentence type {tag.strip()!r}",
                           EXIT_SYMBOL) from None
        yield lineno, symbols, stype


def cmd_synth(args) -> int:
    bundle = load_bundle(args.ckpt)
    model, vocab = bundle.model, bundle.vocab
    out = _writable_dir(Path(args.out))
    items = list(_read_text(Path(args.text), vocab))
    for lineno, symbols, stype in items:
        if not 0 <= stype < model.config.n_sentence_types:
            raise CliError(f"{args.text}:{lineno}: sentence type {stype} out of range",
                           EXIT_SYMBOL)
    for lineno, symbols, stype in items:
        res = model.synthesize([vocab[s] for s in symbols], stype, symbols)
        stem = f"line{lineno:04d}"
        write_mel(out / f"{stem}.mel", res.mel)
        if args.dump_attn:
            _dump_attention(out, stem, res)
        for msg in res.warnings:
            print(f"warning: {stem}: {msg}", file=sys.stderr)
        print(f"{stem}: {res.mel.shape[0]} frames, {len(res.boundaries)} segments, "
              f"{len(res.warnings)} cap warnings")
    return EXIT_OK


def _dump_attention(out: Path, stem: str, res) -> None:
    with open(out / f"{stem}.align.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "segment", "centroid"])
        step, offset = 0, 0
        for si, attn in enumerate(res.cross_attn):
            np.save(out / f"{stem}.seg{si:03d}.attn.npy", attn)
            a = attn.mean(axis=0)
            centroids = a @ (np.arange(a.shape[1]) + offset)
            for c in centroids:
                w.writerow([step, si, f"{c:.6f}"])
                step += 1
            offset += a.shape[1]


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(args.suite, break_sg=args.break_sg)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_config(args) -> int:
    sys.stdout.write(runcfg.canonical(_load_config(args.config)))
    return EXIT_OK


# ---------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stransformer",
                                description="Segment-recurrent transformer TTS (desk scale)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic aligned corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train on a corpus directory")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize mel files from symbol lines")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-attn", action="store_true")
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("--suite", choices=["grad", "oracle", "memory", "causal", "chunker", "all"],
                   default="all")
    v.add_argument("--break-sg", action="store_true",
                   help="mutation: let gradients flow through the memory cache")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("config", help="print the canonical form of a config file")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
