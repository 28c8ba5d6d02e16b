"""SGD with heavy-ball momentum."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_MOMENTUM = 0.99


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """In-place update ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if not (len(params) == len(grads) == len(velocities)):
        raise ValueError("params, grads and velocities differ in length")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if lr:
            p -= p.dtype.type(lr) * v


class SGD:
    """Holds one momentum buffer per parameter tensor."""

    def __init__(self, params: dict[str, Tensor], momentum: float = DEFAULT_MOMENTUM):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        names = list(self.params)
        grads = [
            self.params[n].grad if self.params[n].grad is not None else np.zeros_like(self.params[n].data)
            for n in names
        ]
        sgd_step([self.params[n].data for n in names], grads, [self.velocity[n] for n in names], lr, self.momentum)
