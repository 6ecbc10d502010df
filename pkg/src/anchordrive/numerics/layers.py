"""Model building blocks: parameter registry, linear/MLP layers, cross
attention, and the sinusoidal timestep embedding."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, layer_norm

__all__ = [
    "ParameterSet",
    "Linear",
    "MLP",
    "LayerNorm",
    "CrossAttention",
    "timestep_embedding",
]


class ParameterSet:
    """Ordered registry of named parameters.

    Insertion order is the canonical order for checkpoints and for the
    optimizer, so two models built the same way line up exactly.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter arrays in place; names and shapes must match."""
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self._params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: shape {v.shape} != expected {p.data.shape}")
            p.data = v.copy()


class Linear:
    """Affine map on the last axis: x @ w + b."""

    def __init__(self, params: ParameterSet, prefix: str, n_in: int, n_out: int,
                 rng: np.random.Generator, init: str = "relu"):
        if init == "relu":
            scale = math.sqrt(2.0 / n_in)
        elif init == "linear":
            scale = math.sqrt(1.0 / n_in)
        elif init == "zero":
            scale = 0.0
        else:
            raise ValueError(f"unknown init {init!r}")
        w = rng.normal(0.0, scale, size=(n_in, n_out)) if scale > 0 else np.zeros((n_in, n_out))
        self.w = params.add(f"{prefix}.w", w)
        self.b = params.add(f"{prefix}.b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(
                f"linear expects last dim {self.w.shape[0]}, got input shape {x.shape}"
            )
        return x @ self.w + self.b


class MLP:
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, params: ParameterSet, prefix: str, widths: list[int],
                 rng: np.random.Generator, out_init: str = "linear"):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = []
        last = len(widths) - 2
        for i in range(len(widths) - 1):
            init = out_init if i == last else "relu"
            self.layers.append(Linear(params, f"{prefix}.l{i}", widths[i], widths[i + 1], rng, init))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class LayerNorm:
    def __init__(self, params: ParameterSet, prefix: str, dim: int):
        self.gain = params.add(f"{prefix}.g", np.ones(dim))
        self.bias = params.add(f"{prefix}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class CrossAttention:
    """Multi-head cross attention block.

    Queries and key/value tokens are normalized before attention, the
    attention output is added residually to the raw queries, and the sum
    is normalized again. Inputs are batched: queries (B, Nq, d) attend to
    key/value tokens (B, Nk, d).
    """

    def __init__(self, params: ParameterSet, prefix: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.ln_q = LayerNorm(params, f"{prefix}.ln_q", dim)
        self.ln_kv = LayerNorm(params, f"{prefix}.ln_kv", dim)
        self.ln_out = LayerNorm(params, f"{prefix}.ln_out", dim)
        self.proj_q = Linear(params, f"{prefix}.q", dim, dim, rng, "linear")
        self.proj_k = Linear(params, f"{prefix}.k", dim, dim, rng, "linear")
        self.proj_v = Linear(params, f"{prefix}.v", dim, dim, rng, "linear")
        self.proj_o = Linear(params, f"{prefix}.o", dim, dim, rng, "linear")

    def _split(self, x: Tensor, n: int, batch: int) -> Tensor:
        return x.reshape(batch, n, self.heads, self.head_dim).transpose((0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        if queries.ndim != 3 or keys_values.ndim != 3:
            raise ShapeError(
                f"attention expects (B, N, d) inputs, got {queries.shape} and {keys_values.shape}"
            )
        if queries.shape[-1] != self.dim or keys_values.shape[-1] != self.dim:
            raise ShapeError(
                f"attention dim {self.dim} vs inputs {queries.shape} and {keys_values.shape}"
            )
        b, nq = queries.shape[0], queries.shape[1]
        nk = keys_values.shape[1]
        qn = self.ln_q(queries)
        kvn = self.ln_kv(keys_values)
        q = self._split(self.proj_q(qn), nq, b)
        k = self._split(self.proj_k(kvn), nk, b)
        v = self._split(self.proj_v(kvn), nk, b)
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        attn = scores.softmax()
        mixed = (attn @ v).transpose((0, 2, 1, 3)).reshape(b, nq, self.dim)
        return self.ln_out(queries + self.proj_o(mixed))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion timesteps.

    Frequencies are geometrically spaced from 1 down to 1/10000, and the
    output interleaves sin and cos: slot 2i holds sin(t * f_i), slot 2i+1
    holds cos(t * f_i). t = 0 therefore maps to [0, 1, 0, 1, ...].
    """
    if dim % 2 != 0:
        raise ShapeError(f"timestep embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
