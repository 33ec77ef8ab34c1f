"""Parameter-update rules: plain gradient descent and Adam.

``step`` updates parameters in place from their accumulated gradients and
zeroes the gradients afterwards. Parameters must be updated under
exclusive access; the optimizers keep per-parameter state keyed by
identity, so a parameter list must not be reordered between steps.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter

__all__ = ["SGD", "Adam", "make_optimizer"]


class SGD:
    def __init__(self, params: list[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
            p.data -= self.lr * p.grad
            p.zero_grad()


class Adam:
    def __init__(self, params: list[Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._t
        bias2 = 1.0 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.zero_grad()


def make_optimizer(method: str, params: list[Parameter], lr: float):
    if method == "sgd":
        return SGD(params, lr)
    if method == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer method {method!r}")
