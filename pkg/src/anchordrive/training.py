"""Losses and the two-stage training loop.

The regression target is winner-take-all: each example is matched to the
clean anchor closest to its ground truth, and only that anchor's refined
trajectory pays an L1 penalty. Every anchor's score logit pays a
binary-cross-entropy penalty against the one-hot match, summed over the
vocabulary.

Stage one trains the trajectory decoder alone; the action-belief head is
left out of the optimizer and its output enters the guidance vector as a
detached constant (or as a uniform placeholder, see TrainConfig). Stage
two adds the cross-entropy action term and puts the belief parameters
into a fresh optimizer with a fresh warmup-cosine schedule, so the
decoder re-trains at full rate against the now-meaningful belief. The
belief probabilities stay detached inside the guidance vector in both
stages so the action head is shaped only by its own labels, never by
trajectory regression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import TrajectoryDataset
from .belief import action_ce
from .diffusion import normalize_trajectories
from .numerics import AdamW, ScheduleConfig, Tensor
from .oracle.encoder import OracleWeights, encode_context
from .oracle.scenarios import SceneState
from .planner import Planner

__all__ = ["LAMBDA_WP", "LAMBDA_CLS", "TrainConfig", "ExampleSet",
           "match_closest_anchor", "noisy_anchor_batch", "plan_loss",
           "prepare_examples", "train_planner"]

LAMBDA_WP = 8.0
LAMBDA_CLS = 10.0


def match_closest_anchor(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Index of the clean anchor with minimum average displacement to each
    ground-truth trajectory; exact ties go to the lowest index."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diff = gt[:, None, :, :] - anchors[None, :, :, :]
    dist = np.mean(np.hypot(diff[..., 0], diff[..., 1]), axis=2)
    return np.argmin(dist, axis=1)


def noisy_anchor_batch(anchors_norm: np.ndarray, t: np.ndarray, alpha_bar: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-example forward noising of the anchor vocabulary: example b gets
    the whole anchor set noised at its own timestep t[b]."""
    t = np.asarray(t)
    ab = alpha_bar[t][:, None, None, None]
    eps = rng.standard_normal((t.shape[0],) + anchors_norm.shape)
    return np.sqrt(ab) * anchors_norm[None, ...] + np.sqrt(1.0 - ab) * eps


def plan_loss(refined: Tensor, score_logits: Tensor, gt_norm: np.ndarray,
              positive: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted planning loss.

    Returns (total, wp_term, cls_term) where total =
    LAMBDA_WP * wp_term + LAMBDA_CLS * cls_term. wp_term is the mean
    absolute error of the matched trajectory in normalized units;
    cls_term is the per-example sum of score BCEs, averaged over the
    batch.
    """
    b, na = score_logits.shape
    t_pts = refined.shape[2]
    onehot = np.eye(na)[np.asarray(positive)]
    picked = (Tensor(onehot[:, None, :]) @ refined.reshape(b, na, t_pts * 2))
    gt_flat = np.asarray(gt_norm, dtype=np.float64).reshape(b, t_pts * 2)
    wp = (picked.reshape(b, t_pts * 2) - Tensor(gt_flat)).abs().mean()
    # binary cross entropy straight from logits: softplus(l) - l * target
    cls = (score_logits.softplus() - score_logits * Tensor(onehot)).sum(axis=1).mean()
    total = LAMBDA_WP * wp + LAMBDA_CLS * cls
    return total, wp, cls


@dataclass
class ExampleSet:
    """Pre-encoded training corpus: one row per dataset record."""

    tokens: np.ndarray
    ego: np.ndarray
    gt: np.ndarray
    actions: np.ndarray
    scenarios: list[str] = field(default_factory=list)

    def __post_init__(self):
        m = self.tokens.shape[0]
        if not (self.ego.shape == (m, 2) and self.gt.shape[0] == m
                and self.actions.shape == (m,)):
            raise ValueError(
                f"misaligned example arrays: {self.tokens.shape}, {self.ego.shape}, "
                f"{self.gt.shape}, {self.actions.shape}"
            )

    def __len__(self) -> int:
        return self.tokens.shape[0]


def prepare_examples(pairs: list[tuple[list[SceneState], TrajectoryDataset]],
                     weights: OracleWeights) -> ExampleSet:
    """Encode every (scene, record) pair through the frozen context
    encoder once, up front, so training never touches scene geometry."""
    tokens, ego, gt, actions, scenarios = [], [], [], [], []
    for scenes, dataset in pairs:
        if len(scenes) != len(dataset.records):
            raise ValueError(
                f"scene/record misalignment: {len(scenes)} scenes vs {len(dataset.records)} records"
            )
        for scene, record in zip(scenes, dataset.records):
            tokens.append(encode_context(scene, weights))
            ego.append(record.ego.as_array())
            gt.append(record.trajectory.points)
            actions.append(int(record.action))
            scenarios.append(record.scenario)
    return ExampleSet(tokens=np.stack(tokens), ego=np.stack(ego),
                      gt=np.stack(gt), actions=np.array(actions, dtype=np.int64),
                      scenarios=scenarios)


@dataclass(frozen=True)
class TrainConfig:
    """Two-stage run settings. Learning rates default to values that suit
    training this model from scratch at desk scale."""

    epochs_stage1: int = 3
    epochs_stage2: int = 3
    batch_size: int = 16
    lambda_action: float = 1.0
    lr_start: float = 5e-7
    lr_peak: float = 2e-3
    lr_end: float = 1e-6
    warmup_frac: float = 0.03
    weight_decay: float = 0.1
    seed: int = 0
    # peak rate for the second stage's fresh warmup-cosine schedule; the
    # decoder only needs a gentle adaptation pass there, and restarting at
    # the full stage-1 peak wrecks the converged regression
    lr_peak_stage2: float | None = None
    # stage-1 guidance: live detached belief prediction by default; True
    # swaps in a uniform distribution until the action head is trained
    stage1_uniform_belief: bool = False
    # stage-2 guidance: fraction of examples whose belief input is the
    # ground-truth action one-hot instead of the live prediction. The live
    # belief never varies for a fixed scene, so without this the decoder
    # has no reason to read the intent channel at all; mixing in labeled
    # intents is what makes an inference-time belief override steer the
    # refinement toward the commanded branch
    stage2_teacher_frac: float = 0.5

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0 or self.batch_size < 1:
            raise ValueError("bad epoch or batch settings")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac {self.warmup_frac} outside (0, 1)")
        if not 0.0 <= self.stage2_teacher_frac <= 1.0:
            raise ValueError(f"stage2_teacher_frac {self.stage2_teacher_frac} outside [0, 1]")


def _batches(m: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(m)
    return [order[i:i + batch_size] for i in range(0, m, batch_size)]


def _step(planner: Planner, examples: ExampleSet, idx: np.ndarray,
          opt: AdamW, rng: np.random.Generator, lambda_action: float,
          uniform_belief: bool, teacher_frac: float) -> dict:
    cfg = planner.config
    tokens = examples.tokens[idx]
    gt_m = examples.gt[idx]
    gt_norm = normalize_trajectories(gt_m, cfg.r_max)
    t = rng.integers(1, cfg.t_trunc + 1, size=idx.shape[0])
    y_noisy = noisy_anchor_batch(planner.anchors_norm, t, planner.schedule.alpha_bar, rng)

    ctx = planner.encode_context(tokens)
    action_logits = planner.belief_decoder(Tensor(tokens))
    if uniform_belief:
        probs = np.full(action_logits.shape, 1.0 / action_logits.shape[1])
    else:
        shifted = action_logits.data - action_logits.data.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
    if teacher_frac > 0.0:
        teach = rng.random(idx.shape[0]) < teacher_frac
        onehot = np.eye(probs.shape[1])[examples.actions[idx]]
        probs = np.where(teach[:, None], onehot, probs)
    z_si = planner.state_intent(examples.ego[idx], Tensor(probs))
    refined, score_logits = planner.decoder(y_noisy, ctx, z_si, t.astype(np.float64))

    positive = match_closest_anchor(gt_m, planner.anchors.anchors)
    total, wp, cls = plan_loss(refined, score_logits, gt_norm, positive)
    ce = action_ce(action_logits, examples.actions[idx])
    ce_term = 0.0
    if lambda_action > 0.0:
        total = total + lambda_action * ce
        ce_term = lambda_action * float(ce.data)

    planner.params.zero_grad()
    total.backward()
    lr = opt.step()
    # action_ce is always monitored; action_ce_term is the masked loss
    # contribution, zero until the second stage unmasks the action head
    return {"lr": lr, "loss": float(total.data), "plan_wp": float(wp.data),
            "plan_cls": float(cls.data), "action_ce": float(ce.data),
            "action_ce_term": ce_term}


def train_planner(planner: Planner, examples: ExampleSet, tcfg: TrainConfig,
                  out_dir: str | Path | None = None,
                  log_path: str | Path | None = None,
                  extra: dict | None = None) -> list[dict]:
    """Run both stages and return the per-step history.

    Writes one JSON line per step to log_path when given, and an atomic
    checkpoint per epoch plus a final one under out_dir when given.
    """
    for name in planner.params.names():
        if name.startswith("oracle."):
            raise ValueError(f"frozen context-encoder weight {name!r} leaked into the trainable set")

    m = len(examples)
    if m == 0:
        raise ValueError("no training examples")
    rng = np.random.default_rng(tcfg.seed)
    steps_per_epoch = math.ceil(m / tcfg.batch_size)

    def stage_schedule(epochs: int, peak: float) -> ScheduleConfig:
        steps = max(epochs * steps_per_epoch, 2)
        return ScheduleConfig(
            lr_start=tcfg.lr_start, lr_peak=peak, lr_end=tcfg.lr_end,
            warmup_steps=max(1, int(round(tcfg.warmup_frac * steps))),
            total_steps=steps)

    belief_names = set(planner.belief_param_names())
    stage1_params = [p for p in planner.params if p.name not in belief_names]
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    step = 0

    def run_stage(stage: int, epochs: int, opt: AdamW, lambda_action: float,
                  uniform_belief: bool, teacher_frac: float) -> None:
        nonlocal step
        for epoch in range(epochs):
            for idx in _batches(m, tcfg.batch_size, rng):
                rec = _step(planner, examples, idx, opt, rng, lambda_action,
                            uniform_belief, teacher_frac)
                rec.update({"stage": stage, "epoch": epoch, "step": step})
                history.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                step += 1
            if out_dir is not None:
                planner.save(str(Path(out_dir) / f"stage{stage}_epoch{epoch}"),
                             extra=_ckpt_extra(stage, epoch))

    def _ckpt_extra(stage: int, epoch: int) -> dict:
        payload = dict(extra or {})
        payload.update({"stage": stage, "epoch": epoch, "train_step": step})
        return payload

    try:
        opt1 = AdamW(stage1_params, stage_schedule(tcfg.epochs_stage1, tcfg.lr_peak),
                     weight_decay=tcfg.weight_decay)
        run_stage(1, tcfg.epochs_stage1, opt1, lambda_action=0.0,
                  uniform_belief=tcfg.stage1_uniform_belief, teacher_frac=0.0)
        peak2 = tcfg.lr_peak if tcfg.lr_peak_stage2 is None else tcfg.lr_peak_stage2
        opt2 = AdamW(list(planner.params), stage_schedule(tcfg.epochs_stage2, peak2),
                     weight_decay=tcfg.weight_decay)
        run_stage(2, tcfg.epochs_stage2, opt2, lambda_action=tcfg.lambda_action,
                  uniform_belief=False, teacher_frac=tcfg.stage2_teacher_frac)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        planner.save(str(Path(out_dir) / "final"), extra=_ckpt_extra(2, -1))
    return history
