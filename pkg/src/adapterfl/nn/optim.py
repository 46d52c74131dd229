from __future__ import annotations

from typing import Mapping

import numpy as np

from .layers import Parameter


class SGD:
    """SGD with momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * w)``; ``w <- w - lr * v``.
    Gradients are zeroed after each step.
    """

    def __init__(self, params: Mapping[str, Parameter], lr: float = 0.01, momentum: float = 0.5,
                 weight_decay: float = 1e-3, lr_decay: float = 0.998):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if not 0 < lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        self.params = dict(params)
        self.lr, self.momentum = lr, momentum
        self.weight_decay, self.lr_decay = weight_decay, lr_decay
        self.buffers = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            v = self.buffers[name]
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += d
            p.data -= (self.lr * v).astype(p.data.dtype, copy=False)
            p.grad[...] = 0

    def decay(self) -> float:
        self.lr *= self.lr_decay
        return self.lr


def lr_at(base_lr: float, lr_decay: float, round_index: int) -> float:
    """Learning rate used in (0-based) round ``round_index``: one decay per FL round."""
    return base_lr * lr_decay ** round_index
