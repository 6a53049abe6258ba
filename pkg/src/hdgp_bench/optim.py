"""Adaptive-moment updates on flat numpy parameter vectors."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Return the update to *add* for a descent step on ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return -(self.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.1) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    if total <= 1:
        return base
    frac = step / (total - 1)
    return base * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))
