"""First-order optimizers over lists of autodiff parameters."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError

__all__ = ["Adam", "RAdam", "make_optimizer"]


class Adam:
    """Adam with decoupled weight decay (decay applied to weights, not grads).

    A parameter whose ``.grad`` is ``None`` after backward is treated as
    having zero gradient; with zero weight decay it is left untouched.
    """

    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            self._apply(p, i, m_hat, v_hat, t)
            if self.weight_decay != 0.0:
                p.data -= self.lr * self.weight_decay * p.data

    def _apply(self, p: Tensor, i: int, m_hat, v_hat, t: int):
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class RAdam(Adam):
    """Rectified Adam: the adaptive step is switched off while the variance
    estimate is unreliable (early steps), then scaled by the rectification
    term r_t once the approximated SMA length exceeds 4."""

    kind = "radam"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def _apply(self, p: Tensor, i: int, m_hat, v_hat, t: int):
        beta2_t = self.beta2 ** t
        rho_t = self.rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
        if rho_t > 4.0:
            r_t = np.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf)
                          / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t))
            p.data -= self.lr * r_t * m_hat / (np.sqrt(v_hat) + self.eps)
        else:
            p.data -= self.lr * m_hat


def make_optimizer(kind: str, params, **kwargs):
    kinds = {"adam": Adam, "radam": RAdam}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer kind {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](params, **kwargs)
