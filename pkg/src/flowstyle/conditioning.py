"""Semantic conditioning: a small frozen causal LM as the feature extractor,
a trainable projection into the denoiser width, and per-block zero-gated
cross-attention adapters.

The gate on every adapter output is a zero-initialized linear map of the
noise-level embedding, so a freshly built model ignores its condition
entirely; the gates open during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, RoPECache, attention, causal_bias, key_padding_bias, merge_heads, split_heads
from .vocab import PAD_ID, VOCAB_SIZE


@dataclass(frozen=True)
class TinyLMConfig:
    width: int = 128
    n_layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    s_max: int = 64
    vocab_size: int = VOCAB_SIZE
    pad_id: int = PAD_ID

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


class _LMBlock:
    def __init__(self, cfg: TinyLMConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.qkv = Linear(cfg.width, 3 * cfg.width, rng)
        self.out = Linear(cfg.width, cfg.width, rng)
        self.fc1 = Linear(cfg.width, cfg.mlp_ratio * cfg.width, rng)
        self.fc2 = Linear(cfg.mlp_ratio * cfg.width, cfg.width, rng)

    def __call__(self, x: T.Tensor, rope: RoPECache, bias: np.ndarray) -> T.Tensor:
        w = self.cfg.width
        h = T.layernorm(x)
        qkv = self.qkv(h)
        q = split_heads(T.slice_last(qkv, 0, w), self.cfg.heads)
        k = split_heads(T.slice_last(qkv, w, 2 * w), self.cfg.heads)
        v = split_heads(T.slice_last(qkv, 2 * w, 3 * w), self.cfg.heads)
        q, k = rope.apply(q), rope.apply(k)
        x = T.add(x, self.out(merge_heads(attention(q, k, v, bias))))
        f = self.fc2(T.gelu(self.fc1(T.layernorm(x))))
        return T.add(x, f)

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for name, lin in (("qkv", self.qkv), ("out", self.out), ("fc1", self.fc1), ("fc2", self.fc2)):
            out.update(lin.named_params(f"{prefix}.{name}"))
        return out


class TinyLM:
    """Causal next-token transformer; doubles as frozen feature extractor.

    The output head is zero-initialized, so an untrained model predicts the
    uniform distribution exactly.
    """

    def __init__(self, cfg: TinyLMConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = T.Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.width)), requires_grad=True)
        self.blocks = [_LMBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.head = Linear(cfg.width, cfg.vocab_size, None, zero_init=True)
        self.rope = RoPECache(cfg.s_max, cfg.head_dim)
        self.frozen = False

    def named_params(self, prefix: str = "lm") -> dict[str, T.Tensor]:
        out = {f"{prefix}.embed": self.embed}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"{prefix}.block{i}"))
        out.update(self.head.named_params(f"{prefix}.head"))
        return out

    def freeze(self) -> None:
        self.frozen = True
        for p in self.named_params().values():
            p.requires_grad = False
            p.grad = None

    def _bias(self, mask: np.ndarray, s: int) -> np.ndarray:
        return causal_bias(s) + key_padding_bias(mask)

    def hidden_states(self, ids: np.ndarray, mask: np.ndarray, upto_layer: int) -> T.Tensor:
        """Residual stream after `upto_layer` blocks; [B, S, width]."""
        if not 0 < upto_layer <= self.cfg.n_layers:
            raise ValueError(f"layer index {upto_layer} outside [1, {self.cfg.n_layers}]")
        s = ids.shape[1]
        bias = self._bias(mask, s)
        x = T.gather_rows(self.embed, ids)
        for blk in self.blocks[:upto_layer]:
            x = blk(x, self.rope, bias)
        return x

    def logits(self, ids: np.ndarray, mask: np.ndarray) -> T.Tensor:
        x = self.hidden_states(ids, mask, self.cfg.n_layers)
        return self.head(T.layernorm(x))

    def nll(self, ids: np.ndarray, mask: np.ndarray) -> T.Tensor:
        """Mean next-token negative log-likelihood over non-pad targets."""
        logits = self.logits(ids[:, :-1], mask[:, :-1])
        return T.cross_entropy(logits, ids[:, 1:], pad_id=self.cfg.pad_id)


def train_lm(cfg: TinyLMConfig, sequences: list[np.ndarray], steps: int,
             batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
             grad_clip: float = 1.0, progress=None) -> TinyLM:
    """Fit a next-token model on raw id sequences; the result is NOT frozen."""
    from .embedding import pad_batch
    from .optim import AdamW, clip_global_norm
    from .rng import stream

    if not sequences:
        raise ValueError("cannot train a language model on an empty corpus")
    lm = TinyLM(cfg, stream(seed, "lm-init"))
    rng = stream(seed, "lm-order")
    params = lm.named_params()
    opt = AdamW(params, lr=lr)
    for step in range(steps):
        idx = rng.integers(0, len(sequences), size=batch_size)
        ids, mask = pad_batch([sequences[i] for i in idx])
        with T.Tape() as tape:
            loss = lm.nll(ids, mask)
            tape.backward(loss)
        clip_global_norm(params, grad_clip)
        opt.step()
        opt.zero_grad()
        if progress and step % 200 == 0:
            progress(step, loss.item())
    return lm


def save_lm(path, lm: TinyLM, extra_meta: dict | None = None) -> None:
    from dataclasses import asdict
    from .checkpointio import save_checkpoint

    meta = {"kind": "lm", "lm_config": asdict(lm.cfg), "frozen": lm.frozen}
    meta.update(extra_meta or {})
    save_checkpoint(path, meta, {k: v.data for k, v in lm.named_params().items()})


def load_lm(path) -> tuple[TinyLM, dict]:
    from .checkpointio import assign_params, load_checkpoint
    from .rng import stream

    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "lm":
        raise ValueError(f"{path} is not a language-model checkpoint")
    lm = TinyLM(TinyLMConfig(**meta["lm_config"]), stream(0, "lm-init"))
    assign_params(lm.named_params(), arrays)
    if meta.get("frozen"):
        lm.freeze()
    return lm, meta


class SemanticEncoder:
    """Frozen TinyLM plus a chosen split layer; emits constant hidden states."""

    def __init__(self, lm: TinyLM, split_layer: int = 2):
        if not 1 <= split_layer <= lm.cfg.n_layers - 1:
            raise ValueError(
                f"split layer must lie in [1, {lm.cfg.n_layers - 1}], got {split_layer}")
        self.lm = lm
        self.split_layer = split_layer

    @property
    def width(self) -> int:
        return self.lm.cfg.width

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Hidden states at the split layer, detached: [B, S_q, width]."""
        if not self.lm.frozen:
            raise RuntimeError("semantic encoder must be frozen before use")
        with T.no_grad():
            h = self.lm.hidden_states(ids, mask, self.split_layer)
        return h.data

    def encode_condition(self, seq_ids: np.ndarray) -> np.ndarray:
        """Single-sequence convenience: [S_q] ids -> [S_q, width]."""
        ids = np.asarray(seq_ids, dtype=np.int64)[None, :]
        mask = np.ones_like(ids, dtype=np.float32)
        return self.encode(ids, mask)[0]

    def pooled(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Mean of split-layer hiddens over non-pad positions: [B, width]."""
        h = self.encode(ids, mask)
        denom = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        return (h * mask[:, :, None]).sum(axis=1) / denom


@dataclass
class ConditionBundle:
    """Projected condition states, reusable across all denoising steps of a run.

    Per-block key/value maps are applied lazily (each adapter owns its own),
    so the bundle holds the shared projection output once.
    """

    projected: T.Tensor          # [B, S_q, d]
    kv_bias: np.ndarray          # [B, 1, 1, S_q] additive pad bias
    lengths: np.ndarray          # [B] source lengths


def build_condition(proj: Linear, hidden: np.ndarray, mask: np.ndarray | None = None) -> ConditionBundle:
    """Project encoder hiddens ([B, S_q, enc] or [S_q, enc]) into a bundle."""
    h = np.asarray(hidden, dtype=np.float32)
    if h.ndim == 2:
        h = h[None]
    if mask is None:
        mask = np.ones(h.shape[:2], dtype=np.float32)
    projected = proj(T.Tensor(h))
    lengths = mask.sum(axis=1).astype(np.int64)
    return ConditionBundle(projected, key_padding_bias(mask), lengths)


class CrossAttnAdapter:
    """x + gate(c) * crossattention(LN(x) -> Q; condition -> K,V).

    No output projection: the parameter budget is W_q (d^2), W_kv (2 d^2),
    and the gate map (d^2 + d), about 4 d^2 per block.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.dim = dim
        self.heads = heads
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.w_kv = Linear(dim, 2 * dim, rng, bias=False)
        self.gate = Linear(dim, dim, None, zero_init=True)

    def __call__(self, x: T.Tensor, bundle: ConditionBundle, c: T.Tensor) -> T.Tensor:
        if bundle.projected.shape[-1] != self.dim:
            raise ValueError(
                f"condition width {bundle.projected.shape[-1]} does not match adapter width {self.dim}")
        d = self.dim
        q = split_heads(self.w_q(T.layernorm(x)), self.heads)
        kv = self.w_kv(bundle.projected)
        k = split_heads(T.slice_last(kv, 0, d), self.heads)
        v = split_heads(T.slice_last(kv, d, 2 * d), self.heads)
        out = merge_heads(attention(q, k, v, bundle.kv_bias))
        g = self.gate(c)
        b, dd = g.shape
        return T.add(x, T.mul(T.reshape(g, (b, 1, dd)), out))

    def named_params(self, prefix: str) -> dict[str, T.Tensor]:
        return {
            **self.w_q.named_params(f"{prefix}.wq"),
            **self.w_kv.named_params(f"{prefix}.wkv"),
            **self.gate.named_params(f"{prefix}.gate"),
        }

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_params("a").values())
