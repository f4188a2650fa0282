"""Per-layer FIFO of detached hidden states reused as extended attention context."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import Tensor, concat, stop_gradient


class CachedMemory:
    """Fixed-capacity memory, one buffer per layer, ordered oldest to newest.

    Buffers hold the *inputs* to each layer (h^{n-1}) of previous segments.
    An empty memory (length 0) stands for the zero-initialized state.
    """

    def __init__(self, n_layers: int, capacity: int, d_model: int, detach: bool = True):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.n_layers = n_layers
        self.capacity = capacity
        self.d_model = d_model
        # detach=False exists only for the mutation harness in ``verify``
        self.detach = detach
        self.per_layer: list[Tensor] = []
        self.reset()

    def __len__(self) -> int:
        return self.per_layer[0].shape[0]

    def reset(self) -> "CachedMemory":
        self.per_layer = [Tensor(np.zeros((0, self.d_model))) for _ in range(self.n_layers)]
        return self

    def push(self, layer_states: Sequence[Tensor]) -> "CachedMemory":
        if len(layer_states) != self.n_layers:
            raise ValueError(f"push: got {len(layer_states)} layer states for "
                             f"{self.n_layers} layers")
        lengths = {s.shape[0] for s in layer_states}
        if len(lengths) != 1:
            raise ValueError(f"push: unequal segment lengths across layers {sorted(lengths)}")
        if self.capacity == 0:
            return self
        updated = []
        for old, new in zip(self.per_layer, layer_states):
            if new.shape[-1] != self.d_model:
                raise ValueError(f"push: state width {new.shape[-1]} != d_model {self.d_model}")
            if self.detach:
                joined = np.concatenate([old.data, new.data], axis=0)[-self.capacity:]
                updated.append(stop_gradient(Tensor(joined)))
            else:
                joined = concat([old, new], axis=0)
                updated.append(joined[joined.shape[0] - min(self.capacity, joined.shape[0]):])
        self.per_layer = updated
        return self

    def copy(self) -> "CachedMemory":
        other = CachedMemory(self.n_layers, self.capacity, self.d_model, self.detach)
        other.per_layer = [Tensor(t.data.copy()) for t in self.per_layer]
        return other

    def view(self, layer: int) -> Tensor:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} layers")
        return self.per_layer[layer]
