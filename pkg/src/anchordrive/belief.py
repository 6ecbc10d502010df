"""Meta-action belief decoding and the state-intent conditioning vector.

The lateral action vocabulary is fixed at six classes with a stable
integer encoding; the belief over them is a full softmax distribution,
kept as probabilities rather than collapsed to an argmax so downstream
conditioning can see the uncertainty.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import MLP, ParameterSet, ShapeError, Tensor

__all__ = ["LateralAction", "ACTION_NAMES", "N_ACTIONS", "BeliefState",
           "EgoStatus", "ActionDecoder", "StateIntentEncoder",
           "fuse_state_intent", "action_ce", "action_from_name"]


class LateralAction(enum.IntEnum):
    LANE_FOLLOW = 0
    STRAIGHT = 1
    LEFT = 2
    RIGHT = 3
    LANE_CHANGE_LEFT = 4
    LANE_CHANGE_RIGHT = 5


ACTION_NAMES = ["LaneFollow", "Straight", "Left", "Right",
                "LaneChangeLeft", "LaneChangeRight"]

N_ACTIONS = len(LateralAction)


def action_from_name(name: str) -> LateralAction:
    try:
        return LateralAction(ACTION_NAMES.index(name))
    except ValueError:
        raise ValueError(f"unknown lateral action {name!r}, expected one of {ACTION_NAMES}") from None


@dataclass(frozen=True)
class BeliefState:
    """Probability distribution over the six lateral actions."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (N_ACTIONS,):
            raise ShapeError(f"belief needs shape ({N_ACTIONS},), got {p.shape}")
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"belief is not a distribution: sum={p.sum()}, min={p.min()}")
        object.__setattr__(self, "probs", p)

    @staticmethod
    def one_hot(action: LateralAction) -> "BeliefState":
        p = np.zeros(N_ACTIONS)
        p[int(action)] = 1.0
        return BeliefState(p)

    @staticmethod
    def uniform() -> "BeliefState":
        return BeliefState(np.full(N_ACTIONS, 1.0 / N_ACTIONS))

    def top(self) -> LateralAction:
        return LateralAction(int(np.argmax(self.probs)))


@dataclass(frozen=True)
class EgoStatus:
    """Scalar ego readout fed to the planner: speed (m/s) and world yaw (rad)."""

    speed: float
    yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.speed, self.yaw], dtype=np.float64)


class ActionDecoder:
    """Mean-pools the context tokens and maps them through a three-layer
    feed-forward head to logits over the action vocabulary."""

    def __init__(self, params: ParameterSet, d_context: int,
                 rng: np.random.Generator, hidden: tuple[int, int] = (256, 64),
                 prefix: str = "belief"):
        self.d_context = d_context
        self.ffn = MLP(params, f"{prefix}.ffn",
                       [d_context, hidden[0], hidden[1], N_ACTIONS], rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        """tokens (B, K, D) -> logits (B, 6)."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.d_context:
            raise ShapeError(
                f"action decoder expects (B, K, {self.d_context}) tokens, got {tokens.shape}"
            )
        return self.ffn(tokens.mean(axis=1))

    def belief(self, tokens: Tensor) -> BeliefState:
        """Single-scene convenience: tokens (1, K, D) -> BeliefState."""
        probs = self(tokens).softmax().data[0]
        return BeliefState(probs / probs.sum())


def fuse_state_intent(ego: EgoStatus, belief: BeliefState) -> np.ndarray:
    """Concatenate ego readout and belief into the 8-slot intent vector.

    Layout is [speed, yaw, p_0 .. p_5]; the two halves are recoverable by
    slicing at index 2, nothing is rescaled or mixed here.
    """
    return np.concatenate([ego.as_array(), belief.probs])


class StateIntentEncoder:
    """Two-layer MLP lifting the fused 8-vector into the planner latent."""

    IN_DIM = 2 + N_ACTIONS

    def __init__(self, params: ParameterSet, d_latent: int,
                 rng: np.random.Generator, prefix: str = "si_encoder"):
        self.mlp = MLP(params, prefix, [self.IN_DIM, d_latent, d_latent], rng)

    def __call__(self, fused: Tensor) -> Tensor:
        """fused (B, 8) -> z_si (B, d)."""
        if fused.shape[-1] != self.IN_DIM:
            raise ShapeError(f"state-intent input must have {self.IN_DIM} slots, got {fused.shape}")
        return self.mlp(fused)


def action_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between logits (B, 6) and integer labels (B,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[-1] != N_ACTIONS:
        raise ShapeError(f"logits must be (B, {N_ACTIONS}), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    onehot = np.eye(N_ACTIONS)[labels]
    return -(logits.log_softmax() * onehot).sum(axis=-1).mean()
