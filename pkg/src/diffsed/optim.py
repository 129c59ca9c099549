from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Parameter


class Adam:
    """Adam with decoupled weight decay (AdamW when ``weight_decay > 0``)."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.reset()

    def reset(self):
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise RuntimeError(f"adam step with missing gradients: {missing}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, state: Adam | None = None) -> Adam:
    """Functional form: one update, returning the optimizer carrying moment state."""
    if state is None:
        state = Adam(params, lr, betas, eps, weight_decay)
    state.step()
    return state


def grad_norms(params: Iterable[Parameter]) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.grad)) if p.grad is not None else float("nan") for p in params}
