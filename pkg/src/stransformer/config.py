"""Run configuration: a flat ``key = value`` text file.

Keys are namespaced ``model.*``, ``train.*`` and ``toy.*`` after the dataclass
fields they set, plus a few top-level keys.  Every key has a default; unknown
keys are errors.  ``model.n_symbols`` and ``model.n_mels`` are not settable:
training derives them from the corpus.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .toy import ToySpec
from .train import TrainConfig

DERIVED_MODEL_KEYS = frozenset({"n_symbols", "n_mels"})
TOP_LEVEL = {"seed": 0, "n_utts": 200, "log": ""}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToySpec = field(default_factory=ToySpec)
    seed: int = 0          # model initialisation
    n_utts: int = 200      # gen-corpus size
    log: str = ""          # training CSV; empty means <checkpoint>.csv

    def model_for(self, n_symbols: int, n_mels: int) -> ModelConfig:
        return replace(self.model, n_symbols=n_symbols, n_mels=n_mels)


def _sections():
    return {"model": ModelConfig, "train": TrainConfig, "toy": ToySpec}


def defaults() -> dict[str, object]:
    out: dict[str, object] = {}
    for prefix, cls in _sections().items():
        inst = cls()
        for f in fields(cls):
            if prefix == "model" and f.name in DERIVED_MODEL_KEYS:
                continue
            out[f"{prefix}.{f.name}"] = getattr(inst, f.name)
    out.update(TOP_LEVEL)
    return out


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse(text: str) -> RunConfig:
    known = defaults()
    values = dict(known)
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    return _build(values)


def _build(values: dict[str, object]) -> RunConfig:
    parts = {}
    for prefix, cls in _sections().items():
        kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}
        try:
            parts[prefix] = cls(**kw)
        except ValueError as exc:
            raise ConfigError(f"{prefix}: {exc}") from None
    return RunConfig(parts["model"], parts["train"], parts["toy"],
                     **{k: values[k] for k in TOP_LEVEL})


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse(Path(path).read_text(encoding="utf-8"))


def to_values(cfg: RunConfig) -> dict[str, object]:
    out = {}
    for prefix in _sections():
        sect = getattr(cfg, prefix)
        for f in fields(sect):
            if prefix == "model" and f.name in DERIVED_MODEL_KEYS:
                continue
            out[f"{prefix}.{f.name}"] = getattr(sect, f.name)
    out.update({k: getattr(cfg, k) for k in TOP_LEVEL})
    return out


def canonical(cfg: RunConfig) -> str:
    """Sorted, fully populated form; ``parse(canonical(c)) == c``."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(to_values(cfg).items()))
