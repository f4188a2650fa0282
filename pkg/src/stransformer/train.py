"""Segment-batch training with per-lane cached memories."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .chunker import AlignedUtterance, batch_iterator
from .model import ModelConfig, STransformer, STransformerParams
from .numerics import AdamState, TrainingDivergenceError, adam_step, add, mul, parameter

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "mel", "stop", "chunk_stop", "rate", "lr")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 200
    decay: float = 0.5
    decay_interval: int = 2000
    checkpoint_every: int = 500
    shuffle: bool = True
    seed: int = 0


@dataclass
class Bundle:
    """Everything a checkpoint holds."""

    model: STransformer
    vocab: dict[str, int]
    adam: AdamState | None = None
    train_config: TrainConfig | None = None
    extra: dict | None = None


def save_bundle(path, bundle: Bundle) -> None:
    arrays = {f"param/{k}": t.data for k, t in bundle.model.params.items()}
    meta = {"model": bundle.model.config.to_dict(), "vocab": bundle.vocab,
            "extra": bundle.extra or {}}
    if bundle.train_config is not None:
        meta["train"] = asdict(bundle.train_config)
    if bundle.adam is not None:
        a = bundle.adam
        meta["adam"] = {k: getattr(a, k) for k in ("lr", "beta1", "beta2", "eps", "warmup_steps",
                                                    "decay", "decay_interval", "step")}
        arrays.update({f"adam.m/{k}": v for k, v in a.m.items()})
        arrays.update({f"adam.v/{k}": v for k, v in a.v.items()})
    save_checkpoint(path, meta, arrays)


def load_bundle(path) -> Bundle:
    meta, arrays = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model"])
    tensors = {k.split("/", 1)[1]: parameter(v, k.split("/", 1)[1])
               for k, v in arrays.items() if k.startswith("param/")}
    model = STransformer(config, STransformerParams(tensors, config))
    adam = None
    if "adam" in meta:
        adam = AdamState(**meta["adam"])
        adam.m = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        adam.v = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}
    tcfg = TrainConfig(**meta["train"]) if "train" in meta else None
    return Bundle(model, dict(meta["vocab"]), adam, tcfg, meta.get("extra", {}))


def epoch_order(n: int, epoch: int, cfg: TrainConfig) -> np.ndarray:
    if not cfg.shuffle:
        return np.arange(n)
    return np.random.default_rng([cfg.seed, epoch]).permutation(n)


def iterate_steps(corpus: Sequence[AlignedUtterance], vocab, model_cfg: ModelConfig,
                  cfg: TrainConfig, start_step: int = 0):
    """Yield (step, batch) forever, epochs concatenated, starting at ``start_step``."""
    step = 0
    epoch = 0
    while True:
        order = epoch_order(len(corpus), epoch, cfg)
        for batch in batch_iterator((corpus[i] for i in order), cfg.batch_size,
                                    model_cfg.chunk_size, model_cfg.search_window, vocab):
            if step >= start_step:
                yield step, batch
            step += 1
        epoch += 1


class Trainer:
    def __init__(self, model: STransformer, vocab: dict[str, int], cfg: TrainConfig,
                 adam: AdamState | None = None):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.adam = adam or AdamState(lr=cfg.lr, warmup_steps=cfg.warmup_steps,
                                      decay=cfg.decay, decay_interval=cfg.decay_interval)
        self.lanes = [None] * cfg.batch_size

    def _lane_state(self, lane: int, seg):
        state = self.lanes[lane]
        if seg.is_first or state is None:
            enc, dec = self.model.new_caches()
            state = self.lanes[lane] = {"enc": enc, "dec": dec, "prev": None}
        return state

    def step(self, batch) -> dict[str, float]:
        """One optimizer update over the active lanes of ``batch``."""
        model = self.model
        model.params.zero_grad()
        # dropout noise is a function of the step so a resumed run draws the same masks
        rng = np.random.default_rng([self.cfg.seed, 7, self.adam.step])
        totals, rows = [], []
        for lane, seg in enumerate(batch.lanes):
            if seg is None:
                continue
            st = self._lane_state(lane, seg)
            _, _, loss = model.forward_segment(seg, st["prev"], st["enc"], st["dec"],
                                               rng, training=True)
            st["prev"] = seg.mel[-1]
            totals.append(loss.total)
            rows.append(loss.as_row())
        total = totals[0]
        for t in totals[1:]:
            total = add(total, t)
        total = mul(total, 1.0 / len(totals))
        if not math.isfinite(total.item()):
            raise TrainingDivergenceError(f"step {self.adam.step}", what="loss at")
        total.backward()
        lr = adam_step(model.params.tensors, model.params.grads(), self.adam)
        out = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        out["lr"] = lr
        return out


def train(model: STransformer, corpus: Sequence[AlignedUtterance], vocab: dict[str, int],
          cfg: TrainConfig, out_path=None, log_path=None, adam: AdamState | None = None,
          callback: Callable[[int, dict], None] | None = None,
          time_budget: float | None = None) -> Trainer:
    """Run ``cfg.steps`` total optimizer steps (continuing from ``adam.step``).

    On a non-finite loss the last good checkpoint at ``out_path`` is kept and
    TrainingDivergenceError propagates.
    """
    trainer = Trainer(model, vocab, cfg, adam)
    start = trainer.adam.step
    writer = None
    fh = None
    if log_path is not None:
        new = start == 0 or not os.path.exists(log_path)
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    t0 = time.time()
    try:
        for step, batch in iterate_steps(corpus, vocab, model.config, cfg, start):
            if step >= cfg.steps:
                break
            row = trainer.step(batch)
            if writer is not None:
                writer.writerow([step] + [f"{row[k]:.8g}" for k in LOG_FIELDS[1:]])
            if callback is not None:
                callback(step, row)
            done = step + 1
            if out_path is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
                save_bundle(out_path, Bundle(model, vocab, trainer.adam, cfg))
            if time_budget is not None and time.time() - t0 > time_budget:
                log.warning("time budget exhausted at step %d", done)
                if out_path is not None:
                    save_bundle(out_path, Bundle(model, vocab, trainer.adam, cfg))
                break
    finally:
        if fh is not None:
            fh.close()
    return trainer
