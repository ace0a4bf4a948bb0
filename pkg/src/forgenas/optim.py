"""SGD with momentum and Adam, plus a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


class SGD:
    """SGD with classical momentum: buf = mu*buf + (g + wd*p); p -= lr*buf."""

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, allow_missing: bool = False):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.allow_missing = allow_missing
        self._buffers = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self) -> None:
        for p, buf in zip(self.params, self._buffers):
            if p.grad is None:
                if self.allow_missing:
                    continue
                raise RuntimeError("optimizer step with missing gradient")
            g = p.grad + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf
        self.step_count += 1
        zero_grads(self.params)

    def state(self) -> dict:
        return {"buffers": [b.copy() for b in self._buffers],
                "step_count": self.step_count}

    def load_state(self, state: dict) -> None:
        for b, s in zip(self._buffers, state["buffers"]):
            b[...] = s
        self.step_count = state["step_count"]


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 allow_missing: bool = False):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.allow_missing = allow_missing
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                if self.allow_missing:
                    continue
                raise RuntimeError("optimizer step with missing gradient")
            g = p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        zero_grads(self.params)

    def state(self) -> dict:
        return {"m": [m.copy() for m in self._m],
                "v": [v.copy() for v in self._v],
                "step_count": self.step_count}

    def load_state(self, state: dict) -> None:
        for m, s in zip(self._m, state["m"]):
            m[...] = s
        for v, s in zip(self._v, state["v"]):
            v[...] = s
        self.step_count = state["step_count"]


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from base_lr at epoch 0 toward 0 at the final epoch."""
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
