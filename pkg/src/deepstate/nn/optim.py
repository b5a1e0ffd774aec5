"""Adaptive-moment gradient updates on parameter dictionaries."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam that *descends* the supplied gradients.

    Callers maximizing an objective pass negated gradients.
    """

    def __init__(self, params, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, grads):
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.value = p.value - lr_t * self.m[k] / (np.sqrt(self.v[k]) + self.eps)
