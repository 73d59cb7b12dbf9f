"""Content synthesis network.

Tracks are stacked as ``[B, K + 1, T, d]`` with the K references first
(in retrieval-rank order) and the target last. Each block runs attention
across tracks at every step, then attention across steps within every
track, then a position-wise feed-forward layer; every sub-layer is wrapped
as ``LayerNorm(x + sublayer(x))``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Tensor,
    concatenate,
    no_grad,
    positional_encoding,
)


@dataclass(frozen=True)
class SynthesisConfig:
    d: int = 64
    layers: int = 8
    heads: int = 4
    k: int = 5
    length: int = 24
    v: int = 1
    d_ff: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError(f"hidden dim must be even and >= 2, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"hidden dim {self.d} is not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ValueError("need at least one aggregation block")
        if self.k < 0:
            raise ValueError("reference count must be >= 0")
        if self.length < 1 or self.v < 1:
            raise ValueError("snippet length and variate count must be >= 1")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthesis config keys {sorted(unknown)}")
        return cls(**d)


class AggregationBlock(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.content_attn = MultiHeadAttention(d, heads, rng)
        self.content_norm = LayerNorm(d)
        self.temporal_attn = MultiHeadAttention(d, heads, rng)
        self.temporal_norm = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)
        self.ff_norm = LayerNorm(d)

    def content(self, h: Tensor, return_weights: bool = False):
        """Attend across tracks independently at every time step."""
        per_step = h.swapaxes(-3, -2)
        out = self.content_attn(per_step, return_weights=return_weights)
        if return_weights:
            out, w = out
        z = self.content_norm(h + out.swapaxes(-3, -2))
        return (z, w) if return_weights else z

    def temporal(self, z: Tensor, return_weights: bool = False):
        """Attend across time steps independently within every track."""
        out = self.temporal_attn(z, return_weights=return_weights)
        if return_weights:
            out, w = out
        z = self.temporal_norm(z + out)
        return (z, w) if return_weights else z

    def __call__(self, h: Tensor) -> Tensor:
        z = self.temporal(self.content(h))
        return self.ff_norm(z + self.ff(z))


class SynthesisModel(Module):
    def __init__(self, config: SynthesisConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d
        self.target_in = Linear(config.v, d, rng)
        if config.k > 0:
            self.reference_in = Linear(config.v, d, rng)
        self.input_norm = LayerNorm(d)
        self.blocks = [AggregationBlock(d, config.heads, config.ff_width, rng) for _ in range(config.layers)]
        self.head_hidden = Linear(d, d, rng)
        self.head_out = Linear(d, config.v, rng)
        self._pe = positional_encoding(config.length, d)
        self.bind_names()

    # -- stages ---------------------------------------------------------------

    def _check_inputs(self, target: np.ndarray, refs: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
        cfg = self.config
        target = np.asarray(target, dtype=np.float64)
        if target.ndim != 3 or target.shape[1:] != (cfg.length, cfg.v):
            raise ValueError(f"target must be [B, {cfg.length}, {cfg.v}], got {target.shape}")
        if cfg.k == 0:
            if refs is not None and np.asarray(refs).size and np.asarray(refs).shape[1] != 0:
                raise ValueError("model was built with K=0 but references were given")
            return target, None
        refs = np.asarray(refs, dtype=np.float64)
        expected = (target.shape[0], cfg.k, cfg.length, cfg.v)
        if refs.shape != expected:
            raise ValueError(f"references must be {list(expected)}, got {list(refs.shape)}")
        return target, refs

    def input_embed(self, target, refs=None) -> Tensor:
        """``[B, T, v]`` target and ``[B, K, T, v]`` references -> ``[B, K + 1, T, d]``."""
        target, refs = self._check_inputs(target, refs)
        h_target = (self.target_in(target) + self._pe).reshape(target.shape[0], 1, self.config.length, self.config.d)
        if refs is None:
            h = h_target
        else:
            h = concatenate([self.reference_in(refs) + self._pe, h_target], axis=1)
        return self.input_norm(h)

    def aggregate(self, h: Tensor) -> Tensor:
        for block in self.blocks:
            h = block(h)
        return h

    def output_project(self, h: Tensor) -> Tensor:
        """Read only the target track (last) and map each step back to ``v`` values."""
        return self.head_out(self.head_hidden(h[:, -1]).relu())

    def forward(self, target, mask, refs=None) -> Tensor:
        """Complete a batch of targets; entries with ``mask == 0`` are zeroed first."""
        target = np.asarray(target, dtype=np.float64)
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), target.shape)
        observed = np.where(mask == 1, target, 0.0)
        return self.output_project(self.aggregate(self.input_embed(observed, refs)))

    __call__ = forward

    def predict(self, target, mask, refs=None) -> np.ndarray:
        """Single-snippet inference: ``[T, v]`` in, ``[T, v]`` out, no graph recorded."""
        target = np.asarray(target, dtype=np.float64)[None]
        mask = np.asarray(mask, dtype=np.float64)[None]
        refs = None if refs is None else np.asarray(refs, dtype=np.float64)[None]
        with no_grad():
            return self.forward(target, mask, refs).data[0]
