"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from guidegen.autodiff import Parameter

__all__ = ["AdamW"]


class AdamW:
    """Decoupled weight decay: the decay term never enters the moments."""

    def __init__(self, params, lr=2e-5, beta1=0.99, beta2=0.999,
                 weight_decay=1e-5, eps=1e-8):
        self.params: list[Parameter] = list(params.values() if isinstance(params, dict) else params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.value.data) for p in self.params]
        self._v = [np.zeros_like(p.value.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.reset_grad()

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value.data -= self.lr * (update + self.weight_decay * p.value.data)
