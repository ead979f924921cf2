"""Vocabulary embedding with in-graph length normalization, and the logit
skip path that reads a latent back out against the embedding table.

Emitted embeddings always have row norm sqrt(d): rows are renormalized as
part of the forward graph, so gradients flow through the normalization and
the stored table may drift freely. The logit skip path reads the latent
against the raw stored table (at initialization it is a small perturbation
that grows as the table trains); the sampler's embedding readout uses the
normalized table, matching the embeddings the latents are built from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .schedule import skip_coeff
from .vocab import PAD_ID, VOCAB_SIZE


@dataclass
class TokenSequence:
    """A 1-d array of token ids, pad stripped."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ValueError(f"token sequence must be 1-d, got shape {self.ids.shape}")

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenSequence) and np.array_equal(self.ids, other.ids)

    def tolist(self) -> list[int]:
        return self.ids.tolist()


class VocabEmbedding:
    """[V, d] token embedding table; rows renormalized to norm sqrt(d) in-graph."""

    NORM_FLOOR = 1e-6

    def __init__(self, dim: int, rng: np.random.Generator, vocab_size: int = VOCAB_SIZE,
                 pad_id: int = PAD_ID):
        self.vocab_size = vocab_size
        self.dim = dim
        self.pad_id = pad_id
        self.table = T.Tensor(rng.normal(0.0, 0.02, size=(vocab_size, dim)), requires_grad=True)

    def named_params(self, prefix: str = "embed") -> dict[str, T.Tensor]:
        return {f"{prefix}.table": self.table}

    def normalized_table(self) -> T.Tensor:
        """The full table with every row scaled to L2 norm sqrt(d)."""
        sq = T.tsum(T.square(self.table), axis=-1, keepdims=True)
        norm = T.sqrt(T.clamp_min(sq, self.NORM_FLOOR ** 2))
        return T.mul(self.table, T.div(T.Tensor(np.float32(math.sqrt(self.dim))), norm))

    def embed_ids(self, ids: np.ndarray) -> T.Tensor:
        """Normalized embeddings for an id array of any shape -> [..., d]."""
        ids = np.asarray(ids)
        rows = T.gather_rows(self.table, ids)
        sq = T.tsum(T.square(rows), axis=-1, keepdims=True)
        norm = T.sqrt(T.clamp_min(sq, self.NORM_FLOOR ** 2))
        return T.mul(rows, T.div(T.Tensor(np.float32(math.sqrt(self.dim))), norm))

    def embed(self, seq: TokenSequence) -> T.Tensor:
        return self.embed_ids(seq.ids)

    def skip_logits(self, z: T.Tensor, gamma: float) -> T.Tensor:
        """skip_coeff(gamma) * z @ table^T against the raw stored table."""
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent width {z.shape[-1]} does not match embedding dim {self.dim}")
        wt = T.transpose(self.table, (1, 0))
        return T.scale(T.matmul(z, wt), skip_coeff(gamma))

    def skip_logits_batch(self, z: T.Tensor, gammas: np.ndarray) -> T.Tensor:
        """Per-sample skip logits: z is [B, S, d], gammas is [B]."""
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent width {z.shape[-1]} does not match embedding dim {self.dim}")
        wt = T.transpose(self.table, (1, 0))
        c = np.array([skip_coeff(float(g)) for g in np.asarray(gammas)], dtype=np.float32)
        return T.mul_const(T.matmul(z, wt), c.reshape(-1, 1, 1))


def decode_argmax(logits: T.Tensor | np.ndarray) -> TokenSequence:
    """Per-position argmax over the vocabulary axis; ties go to the lowest id."""
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    if data.ndim != 2:
        raise ValueError(f"decode_argmax expects [S, V] logits, got shape {data.shape}")
    return TokenSequence(np.argmax(data, axis=-1))


def pad_batch(seqs: list[np.ndarray], pad_id: int = PAD_ID,
              length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length id arrays into [B, S] plus a float mask [B, S]."""
    if not seqs:
        raise ValueError("cannot pad an empty batch")
    s_max = length if length is not None else max(len(s) for s in seqs)
    ids = np.full((len(seqs), s_max), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), s_max), dtype=np.float32)
    for i, s in enumerate(seqs):
        if len(s) > s_max:
            raise ValueError(f"sequence of length {len(s)} exceeds batch length {s_max}")
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask
