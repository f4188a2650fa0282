"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-6,
               n_samples: int | None = 64, seed: int = 0,
               report: list | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values on every
    call.  ``n_samples=None`` checks every coordinate.  When ``report`` is a
    list it receives ``(name, index, analytic, numeric)`` per coordinate.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside the supported range")
    for p in params.values():
        p.grad = None
    f().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        num = (hi - lo) / (2.0 * eps)
        ana = analytic[name].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
        if report is not None:
            report.append((name, i, ana, num))
    return worst
