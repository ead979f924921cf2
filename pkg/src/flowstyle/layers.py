"""Shared neural building blocks: linear maps, multi-head attention plumbing,
rotary position tables, sinusoidal noise-level features."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T

MASK_NEG = np.float32(-1e9)


class Linear:
    """y = x @ W (+ b); W is [d_in, d_out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None,
                 std: float = 0.02, bias: bool = True, zero_init: bool = False):
        if zero_init or rng is None:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32)
        self.w = T.Tensor(w, requires_grad=True)
        self.b = T.Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: T.Tensor) -> T.Tensor:
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


def split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    """[B, S, d] -> [B, H, S, d/H]."""
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: T.Tensor) -> T.Tensor:
    """[B, H, S, hd] -> [B, S, d]."""
    b, h, s, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * hd))


def attention(q: T.Tensor, k: T.Tensor, v: T.Tensor,
              bias: np.ndarray | None = None) -> T.Tensor:
    """Scaled dot-product attention over [B, H, S, hd] tensors.

    `bias` is an additive constant (0 for visible, large negative for masked)
    broadcastable to the [B, H, S_q, S_k] score shape.
    """
    hd = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = T.add_const(scores, bias)
    return T.matmul(T.softmax(scores, axis=-1), v)


def key_padding_bias(mask: np.ndarray) -> np.ndarray:
    """[B, S] 1/0 mask -> [B, 1, 1, S] additive bias hiding pad keys."""
    return ((mask - 1.0) * -MASK_NEG).astype(np.float32)[:, None, None, :]


def causal_bias(s: int) -> np.ndarray:
    """[1, 1, S, S] additive bias hiding future positions."""
    b = np.triu(np.full((s, s), MASK_NEG, dtype=np.float32), k=1)
    return b[None, None, :, :]


class RoPECache:
    """Precomputed rotary cos/sin tables, half-split pairing convention."""

    def __init__(self, s_max: int, head_dim: int, base: float = 10000.0):
        if head_dim % 2:
            raise ValueError(f"head_dim must be even for rotary encoding, got {head_dim}")
        half = head_dim // 2
        inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
        angles = np.outer(np.arange(s_max, dtype=np.float64), inv_freq)
        self.cos = np.concatenate([np.cos(angles)] * 2, axis=-1).astype(np.float32)
        self.sin = np.concatenate([np.sin(angles)] * 2, axis=-1).astype(np.float32)
        self.s_max = s_max
        self.head_dim = head_dim

    def apply(self, x: T.Tensor) -> T.Tensor:
        """Rotate [B, H, S, hd] queries or keys by position."""
        s = x.shape[-2]
        if s > self.s_max:
            raise ValueError(f"sequence length {s} exceeds rotary cache size {self.s_max}")
        return T.rope(x, self.cos[:s], self.sin[:s])


def sinusoidal_features(gammas: np.ndarray, n_freq: int = 128,
                        f_min: float = 1.0, f_max: float = 1e4) -> np.ndarray:
    """[B] noise levels -> [B, 2*n_freq] sin/cos features, geometric frequency ladder.

    Computed in float64 and cast once; the features are constants with respect
    to the graph (gamma itself is never differentiated).
    """
    g = np.atleast_1d(np.asarray(gammas, dtype=np.float64))
    freqs = f_min * (f_max / f_min) ** (np.arange(n_freq) / (n_freq - 1))
    phase = g[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1).astype(np.float32)
