"""Adam with per-parameter-group learning rates."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, shapes: dict, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, frozen=()) -> None:
        """In-place update of ``params``; groups in ``frozen`` are left alone."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            if k in frozen:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def keep(self, idx) -> None:
        """Drop moments of pruned rows."""
        for store in (self.m, self.v):
            for k in store:
                store[k] = store[k][idx]
