"""SGD with heavy-ball momentum and the polynomial learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, DimensionError
from .tensor import Tensor

__all__ = ["SgdMomentum", "poly_lr"]


class SgdMomentum:
    """Heavy-ball SGD, weight decay folded into the gradient, one momentum
    buffer per parameter:

        buf <- momentum * buf + grad + weight_decay * param
        param <- param - lr * buf
    """

    def __init__(self, params: list[Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.params = list(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        if lr < 0:
            raise ArgumentError(f"sgd step: lr must be >= 0, got {lr}")
        if len(grads) != len(self.params):
            raise DimensionError(
                f"sgd step: {len(grads)} gradients for {len(self.params)} parameters")
        for p, g, buf in zip(self.params, grads, self.buffers):
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"sgd step: gradient shape {g.shape} != parameter shape "
                    f"{p.data.shape} for {p.name or 'parameter'}")
            buf *= self.momentum
            buf += g
            if self.weight_decay:
                buf += self.weight_decay * p.data
            p.data -= lr * buf


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iteration/max_iter) ** power."""
    if max_iter <= 0:
        raise ArgumentError(f"poly_lr: max_iter must be > 0, got {max_iter}")
    if iteration < 0 or iteration > max_iter:
        raise ArgumentError(
            f"poly_lr: iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power
