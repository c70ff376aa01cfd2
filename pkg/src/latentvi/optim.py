"""Ascent-direction optimizers over flat parameter arrays."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class GradientAscent:
    """theta <- theta + lr * grad. The method the derivations use."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params + self.lr * grad


class Adam:
    """Adaptive-moment ascent, elementwise over arrays of any shape."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = None
        self._v = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(grad)
            self._v = np.zeros_like(grad)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1**self._t)
        v_hat = self._v / (1 - self.beta2**self._t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return GradientAscent(lr)
    if kind == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
