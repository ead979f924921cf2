"""Denoising transformer over token embeddings.

Blocks follow the adaLN-Zero pattern: each sub-block's shift, scale, and
residual gate come from a zero-initialized linear map of the noise-level
embedding, so before training every block (and the zero-initialized final
head) is transparent and the model output reduces exactly to the logit
skip path. Cross-attention adapters, when present, sit between the
self-attention and FFN sub-blocks and are likewise transparent at init.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embedding import VocabEmbedding
from .layers import Linear, RoPECache, attention, key_padding_bias, merge_heads, sinusoidal_features, split_heads
from .vocab import PAD_ID, VOCAB_SIZE


@dataclass(frozen=True)
class DiTConfig:
    n_blocks: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    s_max: int = 64
    vocab_size: int = VOCAB_SIZE
    pad_id: int = PAD_ID
    n_freq: int = 128
    cond_width: int = 128   # width of the frozen encoder's hidden states

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class TimestepEmbedder:
    """gamma -> conditioning vector via sinusoidal features and a 2-layer MLP."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.fc1 = Linear(2 * cfg.n_freq, cfg.dim, rng)
        self.fc2 = Linear(cfg.dim, cfg.dim, rng)

    def __call__(self, gammas: np.ndarray) -> T.Tensor:
        feats = T.Tensor(sinusoidal_features(gammas, self.cfg.n_freq))
        h = T.silu(self.fc1(feats))
        return T.silu(self.fc2(h))

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        return {**self.fc1.named_params(f"{prefix}.fc1"), **self.fc2.named_params(f"{prefix}.fc2")}


def modulate(x: T.Tensor, shift: T.Tensor, scale: T.Tensor) -> T.Tensor:
    """(1 + scale) * layernorm(x) + shift."""
    return T.add(T.mul(T.layernorm(x), T.shift(scale, 1.0)), shift)


def _expand(v: T.Tensor) -> T.Tensor:
    """[B, d] conditioning slice -> [B, 1, d] for broadcasting over positions."""
    b, d = v.shape
    return T.reshape(v, (b, 1, d))


class SelfAttention:
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.qkv = Linear(cfg.dim, 3 * cfg.dim, rng)
        self.out = Linear(cfg.dim, cfg.dim, rng)

    def __call__(self, x: T.Tensor, rope: RoPECache, bias: np.ndarray | None) -> T.Tensor:
        d = self.cfg.dim
        qkv = self.qkv(x)
        q = split_heads(T.slice_last(qkv, 0, d), self.cfg.heads)
        k = split_heads(T.slice_last(qkv, d, 2 * d), self.cfg.heads)
        v = split_heads(T.slice_last(qkv, 2 * d, 3 * d), self.cfg.heads)
        q, k = rope.apply(q), rope.apply(k)
        return self.out(merge_heads(attention(q, k, v, bias)))

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        return {**self.qkv.named_params(f"{prefix}.qkv"), **self.out.named_params(f"{prefix}.out")}


class FeedForward:
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        hidden = cfg.mlp_ratio * cfg.dim
        self.fc1 = Linear(cfg.dim, hidden, rng)
        self.fc2 = Linear(hidden, cfg.dim, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        return {**self.fc1.named_params(f"{prefix}.fc1"), **self.fc2.named_params(f"{prefix}.fc2")}


class DiTBlock:
    """Self-attention and FFN sub-blocks with gated, modulated residuals."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator, adapter=None):
        self.cfg = cfg
        self.attn = SelfAttention(cfg, rng)
        self.ffn = FeedForward(cfg, rng)
        self.adaln = Linear(cfg.dim, 6 * cfg.dim, None, zero_init=True)
        self.adapter = adapter

    def __call__(self, x: T.Tensor, c: T.Tensor, rope: RoPECache,
                 bias: np.ndarray | None, bundle=None) -> T.Tensor:
        d = self.cfg.dim
        mod = self.adaln(c)
        sh1, sc1, g1 = (_expand(T.slice_last(mod, i * d, (i + 1) * d)) for i in range(3))
        sh2, sc2, g2 = (_expand(T.slice_last(mod, i * d, (i + 1) * d)) for i in range(3, 6))
        a = self.attn(modulate(x, sh1, sc1), rope, bias)
        x = T.add(x, T.mul(g1, a))
        if self.adapter is not None and bundle is not None:
            x = self.adapter(x, bundle, c)
        f = self.ffn(modulate(x, sh2, sc2))
        return T.add(x, T.mul(g2, f))

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        out = {
            **self.attn.named_params(f"{prefix}.attn"),
            **self.ffn.named_params(f"{prefix}.ffn"),
            **self.adaln.named_params(f"{prefix}.adaln"),
        }
        return out


class FinalHead:
    """Modulated layernorm followed by a zero-initialized projection to logits."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.adaln = Linear(cfg.dim, 2 * cfg.dim, None, zero_init=True)
        self.proj = Linear(cfg.dim, cfg.vocab_size, None, zero_init=True)

    def __call__(self, x: T.Tensor, c: T.Tensor) -> T.Tensor:
        d = self.cfg.dim
        mod = self.adaln(c)
        shift = _expand(T.slice_last(mod, 0, d))
        scale = _expand(T.slice_last(mod, d, 2 * d))
        return self.proj(modulate(x, shift, scale))

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        return {**self.adaln.named_params(f"{prefix}.adaln"), **self.proj.named_params(f"{prefix}.proj")}
