"""Frozen context oracle.

A fixed random two-layer network maps a structured featurization of the
scene (guidance points ahead in the ego frame, the nearest obstacles,
the instruction one-hot, ego speed) to K hidden context tokens. The
weights come from a dedicated seed, are never registered with any
optimizer, and carry a checksum so training can assert they did not
move.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..geometry import Polyline, world_to_ego
from .scenarios import INSTRUCTION_NAMES, SceneState

__all__ = ["OracleWeights", "make_oracle_weights", "encode_context",
           "featurize_scene", "R_MAX", "ROUTE_SAMPLES", "OBSTACLE_SLOTS",
           "FEATURE_DIM"]

R_MAX = 50.0
ROUTE_SAMPLES = 10
ROUTE_SPACING = 2.5
OBSTACLE_SLOTS = 8
_OBSTACLE_FEATS = 9
_N_INSTRUCTIONS = len(INSTRUCTION_NAMES)
FEATURE_DIM = 2 * ROUTE_SAMPLES + _OBSTACLE_FEATS * OBSTACLE_SLOTS + _N_INSTRUCTIONS + 1

DEFAULT_ORACLE_SEED = 20240711
_HIDDEN = 128
_INSTRUCTION_GAIN = 2.0


@dataclass(frozen=True)
class OracleWeights:
    """Frozen encoder parameters. The names carry an ``oracle.`` prefix so
    optimizer parameter lists can be screened against them."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    k_tokens: int
    d_llm: int
    seed: int

    def named(self) -> dict[str, np.ndarray]:
        return {"oracle.w1": self.w1, "oracle.b1": self.b1,
                "oracle.w2": self.w2, "oracle.b2": self.b2}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.named()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.named()[name], dtype="<f8").tobytes())
        return h.hexdigest()


def make_oracle_weights(seed: int = DEFAULT_ORACLE_SEED, k_tokens: int = 8,
                        d_llm: int = 256) -> OracleWeights:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / FEATURE_DIM), size=(FEATURE_DIM, _HIDDEN))
    b1 = rng.normal(0.0, 0.1, size=_HIDDEN)
    w2 = rng.normal(0.0, np.sqrt(1.0 / _HIDDEN), size=(_HIDDEN, k_tokens * d_llm))
    b2 = rng.normal(0.0, 0.02, size=k_tokens * d_llm)
    return OracleWeights(w1=w1, b1=b1, w2=w2, b2=b2,
                         k_tokens=k_tokens, d_llm=d_llm, seed=seed)


def featurize_scene(scene: SceneState) -> np.ndarray:
    """Structured features, all Lipschitz in the scene quantities."""
    guide = Polyline(scene.route)
    s0, _ = guide.project(scene.ego[:2])
    ahead = np.stack([guide.point_at(s0 + ROUTE_SPACING * (i + 1))
                      for i in range(ROUTE_SAMPLES)])
    route_feats = (world_to_ego(ahead, scene.ego) / R_MAX).reshape(-1)

    obs_feats = np.zeros(OBSTACLE_SLOTS * _OBSTACLE_FEATS)
    if scene.obstacles:
        ex, ey, eyaw = scene.ego
        rel = world_to_ego(np.array([[o.x, o.y] for o in scene.obstacles]), scene.ego)
        order = np.argsort(np.hypot(rel[:, 0], rel[:, 1]), kind="stable")
        for slot, idx in enumerate(order[:OBSTACLE_SLOTS]):
            o = scene.obstacles[int(idx)]
            vel = world_to_ego(np.array([[ex + o.vx, ey + o.vy]]), scene.ego)[0]
            dyaw = o.yaw - eyaw
            base = slot * _OBSTACLE_FEATS
            obs_feats[base:base + _OBSTACLE_FEATS] = [
                rel[idx, 0] / R_MAX, rel[idx, 1] / R_MAX,
                np.cos(dyaw), np.sin(dyaw),
                o.length / 10.0, o.width / 10.0,
                vel[0] / 15.0, vel[1] / 15.0,
                1.0,
            ]

    instr = np.zeros(_N_INSTRUCTIONS)
    if not 0 <= scene.instruction < _N_INSTRUCTIONS:
        raise ValueError(f"instruction id {scene.instruction} outside vocabulary"
                         f" of {_N_INSTRUCTIONS}")
    instr[scene.instruction] = _INSTRUCTION_GAIN

    return np.concatenate([route_feats, obs_feats, instr, [scene.speed / 15.0]])


def encode_context(scene: SceneState, weights: OracleWeights) -> np.ndarray:
    """Deterministic (K, D_llm) hidden-context tokens for a scene."""
    f = featurize_scene(scene)
    h = np.maximum(f @ weights.w1 + weights.b1, 0.0)
    tokens = (h @ weights.w2 + weights.b2).reshape(weights.k_tokens, weights.d_llm)
    if not np.all(np.isfinite(tokens)):
        raise ArithmeticError("context oracle produced non-finite tokens")
    return tokens
