"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import _kernels
from .autodiff import Tensor


def warmup_steps(total: int, warmup_ratio: float) -> int:
    return int(math.ceil(warmup_ratio * total))


def lr_at(step: int, total: int, peak: float, warmup_ratio: float, schedule: str = "cosine") -> float:
    """Linear warmup from 0 to ``peak`` over the warmup steps, then cosine to 0."""
    w = warmup_steps(total, warmup_ratio)
    if step < w:
        return peak * step / w
    if schedule == "constant":
        return peak
    span = max(1, total - w)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm and math.isfinite(total):
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            _kernels.adamw_update(p.data, g, m, v, self.lr, self.b1, self.b2, c1, c2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
