"""Full planning model: context bottleneck, action-belief decoder,
state-intent fusion, and the anchor-initialized diffusion decoder, all
sharing one parameter registry so training and checkpointing see a single
flat weight list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .belief import (ActionDecoder, BeliefState, EgoStatus, N_ACTIONS,
                     StateIntentEncoder, fuse_state_intent)
from .diffusion import (DiffusionDecoder, NoiseSchedule, ScoredTrajectories,
                        T_TRUNC, TOTAL_STEPS, normalize_trajectories,
                        run_truncated_denoising)
from .numerics import (MLP, ParameterSet, ShapeError, Tensor, concat,
                       load_checkpoint, no_grad, save_checkpoint)

__all__ = ["PlannerConfig", "Planner", "PlannerError"]


class PlannerError(Exception):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    """Model dimensions and denoising settings. Serialized verbatim into
    checkpoints so loads can refuse incompatible weight files."""

    d_llm: int = 256
    k_tokens: int = 8
    d_latent: int = 128
    n_anchors: int = 20
    heads: int = 4
    n_steps: int = 2
    t_trunc: int = T_TRUNC
    total_steps: int = TOTAL_STEPS
    r_max: float = 50.0
    belief_hidden: tuple[int, ...] = (256, 64)
    seed: int = 0

    def __post_init__(self):
        if self.d_latent % self.heads != 0:
            raise ValueError(f"latent dim {self.d_latent} not divisible by {self.heads} heads")
        if self.n_steps < 1:
            raise ValueError("need at least one denoising step")
        if not 0 < self.t_trunc <= self.total_steps:
            raise ValueError(f"truncation step {self.t_trunc} outside (0, {self.total_steps}]")
        if min(self.d_llm, self.k_tokens, self.n_anchors, self.r_max) <= 0:
            raise ValueError("dimensions must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["belief_hidden"] = list(self.belief_hidden)
        return out

    @staticmethod
    def from_dict(d: dict) -> "PlannerConfig":
        d = dict(d)
        d["belief_hidden"] = tuple(d.get("belief_hidden", (256, 64)))
        return PlannerConfig(**d)


class Planner:
    """End-to-end planner over opaque context tokens.

    plan() is the single-scene inference path: tokens and ego status in,
    a scored trajectory fan and the decoded action belief out. Training
    code reaches the same submodules through the attributes instead.
    """

    def __init__(self, config: PlannerConfig, anchors: AnchorSet):
        if len(anchors) != config.n_anchors:
            raise PlannerError(
                f"anchor set has {len(anchors)} entries, config expects {config.n_anchors}"
            )
        self.config = config
        self.anchors = anchors
        self.anchors_norm = normalize_trajectories(anchors.anchors, config.r_max)
        self.params = ParameterSet()
        rng = np.random.default_rng(config.seed)
        d = config.d_latent
        self.bottleneck = MLP(self.params, "bottleneck", [config.d_llm, d, d], rng)
        self.belief_decoder = ActionDecoder(self.params, config.d_llm, rng,
                                            hidden=config.belief_hidden)
        self.si_encoder = StateIntentEncoder(self.params, d, rng)
        self.decoder = DiffusionDecoder(self.params, d, config.heads, rng,
                                        n_anchors=config.n_anchors)
        self.schedule = NoiseSchedule.cosine(config.total_steps)

    def belief_param_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("belief.")]

    def encode_context(self, tokens: np.ndarray) -> Tensor:
        """(B, K, D_llm) opaque tokens -> (B, K, d) planner latents."""
        tok = np.asarray(tokens, dtype=np.float64)
        if tok.ndim != 3 or tok.shape[1:] != (self.config.k_tokens, self.config.d_llm):
            raise ShapeError(
                f"expected (B, {self.config.k_tokens}, {self.config.d_llm}) tokens, got {tok.shape}"
            )
        return self.bottleneck(Tensor(tok))

    def state_intent(self, ego_array: np.ndarray, belief_probs: Tensor) -> Tensor:
        """(B, 2) speed/yaw plus (B, 6) belief -> (B, d) guidance latents."""
        ego_t = Tensor(np.asarray(ego_array, dtype=np.float64))
        if ego_t.shape[0] != belief_probs.shape[0] or belief_probs.shape[1] != N_ACTIONS:
            raise ShapeError(
                f"cannot fuse ego {ego_t.shape} with belief {belief_probs.shape}"
            )
        return self.si_encoder(concat([ego_t, belief_probs], axis=1))

    def plan(self, tokens: np.ndarray, ego: EgoStatus, rng: np.random.Generator,
             belief_override: BeliefState | None = None
             ) -> tuple[ScoredTrajectories, BeliefState]:
        tok = np.asarray(tokens, dtype=np.float64)
        if tok.shape != (self.config.k_tokens, self.config.d_llm):
            raise ShapeError(
                f"expected ({self.config.k_tokens}, {self.config.d_llm}) tokens, got {tok.shape}"
            )
        with no_grad():
            batch = tok[None, ...]
            ctx = self.encode_context(batch)
            belief = self.belief_decoder.belief(Tensor(batch))
            used = belief_override if belief_override is not None else belief
            fused = fuse_state_intent(ego, used)
            z_si = self.si_encoder(Tensor(fused[None, :]))
            scored = run_truncated_denoising(
                self.decoder, self.anchors_norm, ctx, z_si, self.schedule,
                self.config.n_steps, self.config.t_trunc, rng, self.config.r_max)
        return scored, belief

    def save(self, path: str, extra: dict | None = None) -> None:
        payload = dict(extra or {})
        payload["anchors"] = self.anchors.anchors.tolist()
        payload["anchors_meta"] = self.anchors.meta
        save_checkpoint(path, self.params, self.config.to_dict(), payload)

    @staticmethod
    def load(path: str, expect: PlannerConfig | None = None) -> tuple["Planner", dict]:
        values, config_dict, extra = load_checkpoint(path)
        config = PlannerConfig.from_dict(config_dict)
        if expect is not None and expect != config:
            diffs = []
            for field in dataclasses.fields(PlannerConfig):
                a, b = getattr(expect, field.name), getattr(config, field.name)
                if a != b:
                    diffs.append(f"{field.name}: expected {a}, checkpoint has {b}")
            raise PlannerError("checkpoint configuration mismatch; " + "; ".join(diffs))
        anchors = AnchorSet(np.asarray(extra["anchors"], dtype=np.float64),
                            meta=extra.get("anchors_meta", {}))
        planner = Planner(config, anchors)
        planner.params.load_values(values)
        return planner, extra
