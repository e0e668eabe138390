"""SGD (with momentum) and Adam."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            g = grads[k]
            if self.momentum:
                v = self.velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[k] = v
                g = v
            p -= (self.lr * g).astype(p.dtype)


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            v = self.v.get(k)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / c1
            v_hat = v / c2
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def sgd_step(params, grads, lr: float, state: SGD | None = None, momentum: float = 0.0) -> SGD:
    opt = state or SGD(lr, momentum)
    opt.step(params, grads)
    return opt


def adam_step(params, grads, state: Adam | None = None, lr: float = 1e-3) -> Adam:
    opt = state or Adam(lr)
    opt.step(params, grads)
    return opt
