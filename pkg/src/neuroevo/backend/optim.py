from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counting import tally

MOMENTUM = 0.9
UPDATE_FLOPS_PER_ELEMENT = 3


@dataclass
class OptimizerState:
    momentum: float = MOMENTUM
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(weights: dict[str, np.ndarray], gradients: dict[str, np.ndarray],
                      state: OptimizerState, learning_rate: float,
                      decay_names: set[str] | None = None) -> None:
    """In-place update: ``v <- m*v + (g + wd*w); w <- w - lr*v``.

    Weight decay only touches names in ``decay_names`` (all names when None).
    """
    for name, g in gradients.items():
        w = weights[name]
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        if v.shape != w.shape:
            raise ValueError(f"{name}: velocity {v.shape} vs weight {w.shape}")
        tally("update", UPDATE_FLOPS_PER_ELEMENT * w.size)
        v *= state.momentum
        v += g
        if state.weight_decay and (decay_names is None or name in decay_names):
            v += state.weight_decay * w
        w -= learning_rate * v
