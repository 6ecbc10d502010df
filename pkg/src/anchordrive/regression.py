"""Single-trajectory regression head, the unimodal reference model.

Same opaque context tokens and ego status in, exactly one trajectory
out, trained with a plain L1 loss. It exists to measure what the
anchor-plus-score machinery buys: where the data is multimodal (the
fork), a lone L1 head has to average the branches while the scored
anchor fan can keep them apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import T_WAYPOINTS
from .diffusion import denormalize_trajectories, normalize_trajectories
from .numerics import (MLP, AdamW, ParameterSet, ScheduleConfig, ShapeError,
                       Tensor, concat, no_grad)
from .training import ExampleSet, TrainConfig

__all__ = ["RegressionConfig", "DirectRegressor", "train_regressor"]


@dataclass(frozen=True)
class RegressionConfig:
    d_llm: int = 256
    k_tokens: int = 8
    d_latent: int = 128
    r_max: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if min(self.d_llm, self.k_tokens, self.d_latent, self.r_max) <= 0:
            raise ValueError("dimensions must be positive")


class DirectRegressor:
    """Token-wise bottleneck, then one MLP from the pooled context plus
    ego status straight to T waypoint coordinates (normalized)."""

    def __init__(self, config: RegressionConfig):
        self.config = config
        self.params = ParameterSet()
        rng = np.random.default_rng(config.seed)
        d = config.d_latent
        self.bottleneck = MLP(self.params, "bottleneck", [config.d_llm, d, d], rng)
        self.head = MLP(self.params, "head", [d + 2, d, d, T_WAYPOINTS * 2], rng)

    def __call__(self, tokens: np.ndarray, ego: np.ndarray) -> Tensor:
        tok = np.asarray(tokens, dtype=np.float64)
        cfg = self.config
        if tok.ndim != 3 or tok.shape[1:] != (cfg.k_tokens, cfg.d_llm):
            raise ShapeError(
                f"expected (B, {cfg.k_tokens}, {cfg.d_llm}) tokens, got {tok.shape}"
            )
        ego_arr = np.asarray(ego, dtype=np.float64)
        if ego_arr.shape != (tok.shape[0], 2):
            raise ShapeError(f"expected ({tok.shape[0]}, 2) ego rows, got {ego_arr.shape}")
        pooled = self.bottleneck(Tensor(tok)).mean(axis=1)
        h = self.head(concat([pooled, Tensor(ego_arr)], axis=1))
        return h.reshape(tok.shape[0], T_WAYPOINTS, 2)

    def predict(self, tokens: np.ndarray, ego: np.ndarray) -> np.ndarray:
        """Inference in meters, gradients off."""
        with no_grad():
            out = self(tokens, ego)
        return denormalize_trajectories(out.data, self.config.r_max)


def train_regressor(reg: DirectRegressor, examples: ExampleSet,
                    tcfg: TrainConfig) -> list[dict]:
    """L1 fit over the same example corpus and schedule shape the planner
    trains with (total epochs = both stages, one warmup-cosine ramp)."""
    m = len(examples)
    if m == 0:
        raise ValueError("no training examples")
    epochs = tcfg.epochs_stage1 + tcfg.epochs_stage2
    steps_per_epoch = math.ceil(m / tcfg.batch_size)
    total_steps = max(epochs * steps_per_epoch, 2)
    schedule = ScheduleConfig(
        lr_start=tcfg.lr_start, lr_peak=tcfg.lr_peak, lr_end=tcfg.lr_end,
        warmup_steps=max(1, int(round(tcfg.warmup_frac * total_steps))),
        total_steps=total_steps)
    opt = AdamW(list(reg.params), schedule, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    gt_norm = normalize_trajectories(examples.gt, reg.config.r_max)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(m)
        for lo in range(0, m, tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            pred = reg(examples.tokens[idx], examples.ego[idx])
            loss = (pred - Tensor(gt_norm[idx])).abs().mean()
            reg.params.zero_grad()
            loss.backward()
            lr = opt.step()
            history.append({"step": step, "epoch": epoch, "lr": lr,
                            "l1": float(loss.data)})
            step += 1
    return history
