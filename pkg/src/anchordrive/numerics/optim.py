"""AdamW optimizer with a linear-warmup, cosine-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NumericError, Parameter

__all__ = ["ScheduleConfig", "lr_at", "AdamW"]


@dataclass(frozen=True)
class ScheduleConfig:
    lr_start: float = 5e-7
    lr_peak: float = 2e-5
    lr_end: float = 1e-6
    warmup_steps: int = 100
    total_steps: int = 1000

    def __post_init__(self):
        if not (0 < self.lr_start and 0 < self.lr_peak and 0 < self.lr_end):
            raise ValueError("learning rates must be positive")
        if not (0 < self.warmup_steps < self.total_steps):
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} and {self.total_steps}"
            )


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate at a 0-based step: linear ramp to the peak, then
    cosine decay reaching lr_end exactly at the final step."""
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
    last = cfg.total_steps - 1
    if step >= last:
        return cfg.lr_end
    frac = (step - cfg.warmup_steps) / (last - cfg.warmup_steps)
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay applied directly to the weights."""

    def __init__(self, params: list[Parameter], schedule: ScheduleConfig,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.1, start_step: int = 0):
        self.params = list(params)
        self.schedule = schedule
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = start_step
        self._updates = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return lr_at(self.step_count, self.schedule)

    def step(self) -> float:
        """Apply one update from the gradients currently on the parameters.

        Returns the learning rate that was used. Parameters whose grad is
        None (not on the loss path) are left untouched.
        """
        lr = self.lr
        b1, b2 = self.betas
        t = self._updates + 1
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient on {p.name}")
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            mhat = self._m[i] / c1
            vhat = self._v[i] / c2
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
        self.step_count += 1
        self._updates += 1
        return lr
