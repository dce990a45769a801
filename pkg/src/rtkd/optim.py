"""SGD with momentum, decoupled-by-flag weight decay, and a step schedule."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class SGD:
    """v <- m*v + g + wd*theta ; theta <- theta - lr*v.

    Parameters flagged ``weight_decay=False`` (norm affines, positional
    encodings, biases) skip the decay term. A parameter with no gradient this
    step still advances by momentum and decay.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float, weight_decay: float):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)

    def step(self) -> None:
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and p.weight_decay:
                g = g + self.weight_decay * p.data
            buf = p.momentum_buffer
            buf *= self.momentum
            buf += g
            p.data[...] -= self.lr * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def lr_at_epoch(base_lr: float, drop_epochs: Iterable[int], factor: float, epoch: int) -> float:
    """Step schedule: multiply by ``factor`` at every drop epoch reached.

    Applied as repeated multiplication so the recorded rate at a drop epoch is
    exactly the previous rate times the factor.
    """
    lr = float(base_lr)
    for d in drop_epochs:
        if epoch >= d:
            lr *= factor
    return lr
