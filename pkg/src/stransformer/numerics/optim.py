"""Adam with a warmup + exponential-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class TrainingDivergenceError(FloatingPointError):
    """A gradient or parameter became non-finite."""

    def __init__(self, name: str, what: str = "gradient in parameter"):
        super().__init__(f"non-finite {what} {name!r}")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    decay: float = 1.0
    decay_interval: int = 1000
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def rate(self, t: int) -> float:
        """lr(t) = base * min(1, t / warmup) * decay ** (t / decay_interval)."""
        warm = 1.0 if self.warmup_steps <= 0 else min(1.0, t / self.warmup_steps)
        return self.lr * warm * self.decay ** (t / self.decay_interval)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> float:
    """Apply one bias-corrected Adam update in place; returns the rate used.

    Parameters without a gradient are left untouched (their moments do not decay).
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(name)
    state.step += 1
    t = state.step
    lr = state.rate(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
