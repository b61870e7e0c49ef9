"""Adam with decoupled weight decay plus the warmup/cosine schedule.

Weight decay applies to matrices only (tables and projections), never to
biases or norm affines. Gradients are globally clipped before the update.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend as K
from .config import TrainConfig


def lr_at(tcfg: TrainConfig, step: int) -> float:
    """Learning rate for 1-indexed `step`; peak exactly at warmup_steps."""
    peak = tcfg.learning_rate
    if tcfg.warmup_steps > 0 and step <= tcfg.warmup_steps:
        return peak * step / tcfg.warmup_steps
    if tcfg.lr_schedule == "constant":
        return peak
    span = max(tcfg.total_steps - tcfg.warmup_steps, 1)
    frac = min(max(step - tcfg.warmup_steps, 0) / span, 1.0)
    return peak * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


class AdamW:
    def __init__(self, params: dict, tcfg: TrainConfig):
        self.params = dict(params)
        self.tcfg = tcfg
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.updates = 0

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                g = p.grad.reshape(-1)
                total += float(g @ g)
        return math.sqrt(total)

    def step(self, step_idx: int) -> tuple[float, float]:
        """Apply one update for 1-indexed step; returns (lr, grad_norm)."""
        tcfg = self.tcfg
        lr = lr_at(tcfg, step_idx)
        norm = self.grad_norm()
        clip = 1.0
        if tcfg.grad_clip > 0 and norm > tcfg.grad_clip:
            clip = tcfg.grad_clip / norm
        self.updates += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.reshape(-1)
            if clip != 1.0:
                g = (g * np.float32(clip)).astype(np.float32)
            wd = tcfg.weight_decay if p.data.ndim >= 2 else 0.0
            K.adamw_update(p.data.reshape(-1), g, self.m[name].reshape(-1),
                           self.v[name].reshape(-1), lr, tcfg.beta1, tcfg.beta2,
                           tcfg.eps, wd, self.updates)
            p.grad = None
        return lr, norm
