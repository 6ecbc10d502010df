"""Anchor-initialized truncated diffusion decoder.

Instead of denoising from pure Gaussian noise, inference starts from the
k-means anchor vocabulary perturbed with the small amount of noise that a
variance-preserving cosine schedule assigns to a truncation step far below
the full schedule length. A fixed short timestep ladder is then walked
with deterministic carry: each step feeds its refined output directly to
the next, with no re-noising, so the whole rollout spends exactly
``n_steps`` decoder passes.

All trajectories inside the decoder live in normalized units (meters
divided by the planning radius), which keeps coordinates in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import T_WAYPOINTS
from .numerics import (MLP, CrossAttention, LayerNorm, Linear, ParameterSet,
                       ShapeError, Tensor, no_grad, timestep_embedding)

__all__ = ["TOTAL_STEPS", "T_TRUNC", "NoiseSchedule", "normalize_trajectories",
           "denormalize_trajectories", "add_truncated_noise",
           "DiffusionDecoder", "ScoredTrajectories", "run_truncated_denoising",
           "select_trajectory"]

TOTAL_STEPS = 1000
T_TRUNC = 50


class NoiseSchedule:
    """Variance-preserving cosine schedule, tabulated as cumulative signal
    fractions alpha_bar[0..total_steps] with alpha_bar[0] = 1 exactly."""

    def __init__(self, alpha_bar: np.ndarray):
        ab = np.asarray(alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab[0] != 1.0:
            raise ValueError("alpha_bar must be 1-d and start at exactly 1.0")
        if np.any(np.diff(ab) >= 0) or ab[-1] <= 0.0:
            raise ValueError("alpha_bar must be strictly decreasing and positive")
        self.alpha_bar = ab
        self.total_steps = len(ab) - 1

    @staticmethod
    def cosine(total_steps: int = TOTAL_STEPS, s: float = 0.008) -> "NoiseSchedule":
        t = np.arange(total_steps + 1) / total_steps
        f = np.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2
        return NoiseSchedule(f / f[0])

    def timestep_ladder(self, n_steps: int, t_trunc: int = T_TRUNC) -> list[int]:
        """Descending inference timesteps, e.g. n=2, trunc=50 -> [50, 25]."""
        if n_steps < 1:
            raise ValueError(f"need at least one denoising step, got {n_steps}")
        if not 0 < t_trunc <= self.total_steps:
            raise ValueError(f"truncation step {t_trunc} outside (0, {self.total_steps}]")
        ladder = [round(t_trunc * (n_steps - k) / n_steps) for k in range(n_steps)]
        if len(set(ladder)) != n_steps or ladder[-1] < 1:
            raise ValueError(f"degenerate timestep ladder {ladder} for n={n_steps}")
        return ladder


def normalize_trajectories(points: np.ndarray, r_max: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    peak = float(np.max(np.abs(pts))) if pts.size else 0.0
    if peak > r_max:
        raise ValueError(f"coordinate {peak:.2f} m exceeds the {r_max:.0f} m planning radius")
    return pts / r_max


def denormalize_trajectories(points: np.ndarray, r_max: float) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * r_max


def add_truncated_noise(anchors_norm: np.ndarray, t: int, schedule: NoiseSchedule,
                        rng: np.random.Generator) -> np.ndarray:
    """Light forward noising at step t: sqrt(ab_t) * A + sqrt(1 - ab_t) * eps."""
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"timestep {t} outside [0, {schedule.total_steps}]")
    ab = schedule.alpha_bar[t]
    eps = rng.standard_normal(anchors_norm.shape)
    return math.sqrt(ab) * anchors_norm + math.sqrt(1.0 - ab) * eps


class DiffusionDecoder:
    """One conditioned denoising pass over all anchors in parallel.

    Pipeline per call: embed the current trajectories, cross-attend into
    the bottlenecked context tokens, cross-attend into the single
    state-intent token, feed-forward, modulate by the timestep embedding,
    then read out per-anchor waypoint offsets and classification logits.
    The waypoint head is residual: zero weights give back the input
    trajectories unchanged.
    """

    def __init__(self, params: ParameterSet, d_latent: int, heads: int,
                 rng: np.random.Generator, n_anchors: int = 20,
                 prefix: str = "decoder"):
        d = d_latent
        self.d = d
        self.traj_encoder = MLP(params, f"{prefix}.traj_enc", [T_WAYPOINTS * 2, d, d], rng)
        # linear skip inside the anchor encoder keeps an undistorted copy of
        # the input coordinates in the latent stream, so the waypoint head can
        # learn to cancel the injected noise instead of only shifting anchors
        self.traj_skip = Linear(params, f"{prefix}.traj_skip", T_WAYPOINTS * 2, d, rng, "linear")
        # the sampler noises anchor i into slot i and keeps slots aligned
        # across the ladder, so slot identity is information the denoiser
        # legitimately has. At truncation-level noise the coordinates alone
        # cannot tell neighboring anchors apart, and the regression target
        # is slot-conditional, so without this the slots blur together and
        # branching modes average out. Zero-init: inert until trained.
        self.slot_embed = params.add(f"{prefix}.slot_embed", np.zeros((n_anchors, d)))
        self.ctx_attn = CrossAttention(params, f"{prefix}.ctx_attn", d, heads, rng)
        self.gui_attn = CrossAttention(params, f"{prefix}.gui_attn", d, heads, rng)
        self.ffn_ln_in = LayerNorm(params, f"{prefix}.ffn_ln_in", d)
        self.ffn = MLP(params, f"{prefix}.ffn", [d, 2 * d, d], rng)
        self.ffn_ln_out = LayerNorm(params, f"{prefix}.ffn_ln_out", d)
        self.time_hidden = MLP(params, f"{prefix}.time_hidden", [d, d], rng, out_init="relu")
        self.time_scale = MLP(params, f"{prefix}.time_scale", [d, d], rng, out_init="zero")
        self.time_shift = MLP(params, f"{prefix}.time_shift", [d, d], rng, out_init="zero")
        self.waypoint_head = MLP(params, f"{prefix}.waypoint_head",
                                 [d, d, T_WAYPOINTS * 2], rng)
        self.score_head = MLP(params, f"{prefix}.score_head", [d, d, 1], rng)

    def __call__(self, y_current: np.ndarray, ctx_tokens: Tensor, z_si: Tensor,
                 t: np.ndarray) -> tuple[Tensor, Tensor]:
        """y_current (B, Na, T, 2) normalized, ctx_tokens (B, K, d),
        z_si (B, d), t (B,) -> refined (B, Na, T, 2), score logits (B, Na)."""
        y = np.asarray(y_current, dtype=np.float64)
        if y.ndim != 4 or y.shape[2:] != (T_WAYPOINTS, 2):
            raise ShapeError(f"expected (B, Na, {T_WAYPOINTS}, 2) trajectories, got {y.shape}")
        b, na = y.shape[0], y.shape[1]
        if ctx_tokens.shape[0] != b or z_si.shape != (b, self.d):
            raise ShapeError(
                f"conditioning batch mismatch: y {y.shape}, ctx {ctx_tokens.shape}, z_si {z_si.shape}"
            )
        if na != self.slot_embed.data.shape[0]:
            raise ShapeError(
                f"{na} anchor slots but the decoder was built for {self.slot_embed.data.shape[0]}"
            )
        flat = Tensor(y.reshape(b, na, T_WAYPOINTS * 2))
        h = self.traj_encoder(flat) + self.traj_skip(flat) + self.slot_embed
        h = self.ctx_attn(h, ctx_tokens)
        h = self.gui_attn(h, z_si.reshape(b, 1, self.d))
        h = self.ffn_ln_out(h + self.ffn(self.ffn_ln_in(h)))
        temb = Tensor(timestep_embedding(np.asarray(t, dtype=np.float64), self.d))
        thid = self.time_hidden(temb).relu()
        scale = self.time_scale(thid).reshape(b, 1, self.d)
        shift = self.time_shift(thid).reshape(b, 1, self.d)
        h = h * (scale + 1.0) + shift
        offsets = self.waypoint_head(h)
        refined = (flat + offsets).reshape(b, na, T_WAYPOINTS, 2)
        logits = self.score_head(h).reshape(b, na)
        return refined, logits


@dataclass
class ScoredTrajectories:
    """Refined anchor fan for one scene: trajectories in meters (ego
    frame), sigmoid confidences, and the raw logits they came from."""

    trajectories: np.ndarray
    scores: np.ndarray
    score_logits: np.ndarray

    def __post_init__(self):
        n = self.trajectories.shape[0]
        if self.trajectories.shape[1:] != (T_WAYPOINTS, 2):
            raise ShapeError(f"trajectories shape {self.trajectories.shape}")
        if self.scores.shape != (n,) or self.score_logits.shape != (n,):
            raise ShapeError(f"scores shape {self.scores.shape} for {n} trajectories")
        if np.any((self.scores <= 0.0) | (self.scores >= 1.0)):
            raise ValueError("scores must lie strictly inside (0, 1)")

    def __len__(self) -> int:
        return self.trajectories.shape[0]


def run_truncated_denoising(decoder: DiffusionDecoder, anchors_norm: np.ndarray,
                            ctx_tokens: Tensor, z_si: Tensor,
                            schedule: NoiseSchedule, n_steps: int, t_trunc: int,
                            rng: np.random.Generator, r_max: float) -> ScoredTrajectories:
    """Anchor-initialized inference: noise the anchors once at the
    truncation step, then walk the ladder with deterministic carry."""
    ladder = schedule.timestep_ladder(n_steps, t_trunc)
    with no_grad():
        y = add_truncated_noise(anchors_norm, ladder[0], schedule, rng)[None, ...]
        logits = None
        for t in ladder:
            refined, logits = decoder(y, ctx_tokens, z_si, np.array([float(t)]))
            y = refined.data
        score_logits = logits.data[0]
    sig = 1.0 / (1.0 + np.exp(-score_logits))
    return ScoredTrajectories(
        trajectories=denormalize_trajectories(y[0], r_max),
        scores=sig,
        score_logits=score_logits,
    )


def select_trajectory(scored: ScoredTrajectories) -> tuple[int, np.ndarray]:
    """Highest-confidence trajectory; exact ties resolve to the lowest index."""
    idx = int(np.argmax(scored.scores))
    return idx, scored.trajectories[idx]
