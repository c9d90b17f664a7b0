"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence, state: AdamWState, lr: float,
               weight_decay: float = 2e-4, betas: tuple = (0.9, 0.999),
               eps: float = 1e-8) -> tuple[Sequence[np.ndarray], AdamWState]:
    """Update ``params`` in place.

    The decay ``p -= lr * wd * p`` is applied before, and separately from,
    the bias-corrected Adam step.  A ``None`` gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a list of tensors."""

    def __init__(self, tensors, lr: float = 1e-3, weight_decay: float = 2e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state = AdamWState()

    def step(self) -> None:
        adamw_step([t.data for t in self.tensors], [t.grad for t in self.tensors], self.state,
                   self.lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None
