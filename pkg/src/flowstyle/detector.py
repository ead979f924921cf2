"""Toy classifier stand-ins that score how "machine-styled" a token sequence is.

Three architectures, each with its own embedding table (independent of the
flow model's): a mean-pool MLP, a single-block attention classifier, and a
logistic regression on unigram plus hashed-bigram frequencies. One trained
instance plays the in-the-loop role; further instances (other arch/seed)
stay held out for the transfer-generalization protocol.

`score_soft` is the differentiable relaxation used by the training reward:
the detector runs on probability-weighted embeddings (or expected count
features), so gradients reach the token distribution but never the frozen
detector parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import TokenSequence, pad_batch
from .layers import Linear, attention, key_padding_bias, merge_heads, split_heads
from .optim import AdamW
from .rng import stream
from .vocab import PAD_ID, VOCAB_SIZE

ARCHITECTURES = ("meanpool_mlp", "attention", "bigram_logistic")

_EMBED_DIM = 32
_MLP_HIDDEN = 64
_BIGRAM_BUCKETS = 2048


class DetectorTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorScore:
    p_ai: float

    def __post_init__(self):
        if not 0.0 <= self.p_ai <= 1.0:
            raise ValueError(f"detector score must lie in [0, 1], got {self.p_ai}")


def _bigram_buckets() -> np.ndarray:
    a = np.arange(VOCAB_SIZE, dtype=np.int64)
    return ((a[:, None] * 8191 + a[None, :]) % _BIGRAM_BUCKETS).astype(np.int64)


_BUCKETS = _bigram_buckets()


def _soft_bigram_freq(token_probs: T.Tensor) -> T.Tensor:
    """Expected hashed-bigram frequencies of a [S, V] position distribution."""
    p = token_probs  # alias for the closure
    s, v = p.shape

    pd = p.data
    counts = np.zeros(_BIGRAM_BUCKETS, dtype=np.float32)
    outers = []
    for i in range(s - 1):
        m = np.outer(pd[i], pd[i + 1])
        outers.append(m)
        counts += np.bincount(_BUCKETS.ravel(), weights=m.ravel(), minlength=_BIGRAM_BUCKETS).astype(np.float32)
    counts /= max(s - 1, 1)

    def backward(g):
        gm = g[_BUCKETS] / max(s - 1, 1)  # [V, V]
        gp = np.zeros_like(pd)
        for i in range(s - 1):
            gp[i] += gm @ pd[i + 1]
            gp[i + 1] += gm.T @ pd[i]
        return (gp,)

    return T._emit((p,), counts, backward)


class ToyDetector:
    def __init__(self, arch: str, seed: int):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown detector architecture {arch!r}; choose from {ARCHITECTURES}")
        self.arch = arch
        self.seed = seed
        self.frozen = False
        self.holdout_accuracy: float | None = None
        rng = stream(seed, "detector-init", arch)
        if arch == "bigram_logistic":
            self.out = Linear(VOCAB_SIZE + _BIGRAM_BUCKETS, 1, rng, std=0.02)
        else:
            self.embed = T.Tensor(rng.normal(0.0, 0.02, size=(VOCAB_SIZE, _EMBED_DIM)), requires_grad=True)
            if arch == "meanpool_mlp":
                self.fc1 = Linear(_EMBED_DIM, _MLP_HIDDEN, rng)
                self.out = Linear(_MLP_HIDDEN, 1, rng)
            else:  # attention
                self.qkv = Linear(_EMBED_DIM, 3 * _EMBED_DIM, rng)
                self.attn_out = Linear(_EMBED_DIM, _EMBED_DIM, rng)
                self.fc1 = Linear(_EMBED_DIM, _MLP_HIDDEN, rng)
                self.out = Linear(_MLP_HIDDEN, 1, rng)

    def named_params(self, prefix: str = "det") -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        if self.arch != "bigram_logistic":
            out[f"{prefix}.embed"] = self.embed
            out.update(self.fc1.named_params(f"{prefix}.fc1"))
            if self.arch == "attention":
                out.update(self.qkv.named_params(f"{prefix}.qkv"))
                out.update(self.attn_out.named_params(f"{prefix}.attn_out"))
        out.update(self.out.named_params(f"{prefix}.out"))
        return out

    def freeze(self) -> None:
        self.frozen = True
        for p in self.named_params().values():
            p.requires_grad = False
            p.grad = None

    # ---- feature paths ----

    def _count_features(self, ids: np.ndarray) -> np.ndarray:
        """Unigram + hashed-bigram frequencies for one unpadded id array."""
        n = len(ids)
        uni = np.bincount(ids, minlength=VOCAB_SIZE).astype(np.float32) / n
        if n > 1:
            bi = np.bincount(_BUCKETS[ids[:-1], ids[1:]], minlength=_BIGRAM_BUCKETS).astype(np.float32) / (n - 1)
        else:
            bi = np.zeros(_BIGRAM_BUCKETS, dtype=np.float32)
        return np.concatenate([uni, bi])

    def _logits_from_embeddings(self, emb: T.Tensor, mask: np.ndarray) -> T.Tensor:
        """[B, S, e] token embeddings (hard or soft) -> [B] classifier logits."""
        denom = mask.sum(axis=1, keepdims=True).astype(np.float32)
        if self.arch == "attention":
            h = T.layernorm(emb)
            e = _EMBED_DIM
            qkv = self.qkv(h)
            q = split_heads(T.slice_last(qkv, 0, e), 2)
            k = split_heads(T.slice_last(qkv, e, 2 * e), 2)
            v = split_heads(T.slice_last(qkv, 2 * e, 3 * e), 2)
            a = self.attn_out(merge_heads(attention(q, k, v, key_padding_bias(mask))))
            emb = T.add(emb, a)
        pooled = T.mul_const(T.tsum(T.mul_const(emb, mask[:, :, None]), axis=1), 1.0 / denom)
        h = T.gelu(self.fc1(pooled))
        logit = self.out(h)
        return T.reshape(logit, (logit.shape[0],))

    def logits_batch(self, ids: np.ndarray, mask: np.ndarray) -> T.Tensor:
        """[B, S] padded ids -> [B] logits (differentiable w.r.t. own params)."""
        if self.arch == "bigram_logistic":
            feats = np.stack([self._count_features(row[m.astype(bool)])
                              for row, m in zip(ids, mask)])
            logit = self.out(T.Tensor(feats))
            return T.reshape(logit, (logit.shape[0],))
        emb = T.gather_rows(self.embed, ids)
        return self._logits_from_embeddings(emb, mask)

    # ---- public scoring ----

    def score(self, seq: TokenSequence) -> DetectorScore:
        if len(seq) == 0:
            raise ValueError("cannot score an empty sequence")
        with T.no_grad():
            p = self.score_many([seq.ids])[0]
        return DetectorScore(float(p))

    def score_many(self, id_arrays: list[np.ndarray]) -> np.ndarray:
        """Probabilities for a list of unpadded id arrays."""
        if any(len(a) == 0 for a in id_arrays):
            raise ValueError("cannot score an empty sequence")
        with T.no_grad():
            ids, mask = pad_batch([np.asarray(a, dtype=np.int64) for a in id_arrays])
            logits = self.logits_batch(ids, mask)
            return T.sigmoid(logits).data.copy()

    def score_soft(self, token_probs: T.Tensor, mask: np.ndarray | None = None) -> T.Tensor:
        """Differentiable score of a [S, V] per-position token distribution."""
        pd = token_probs.data
        if pd.ndim != 2 or pd.shape[1] != VOCAB_SIZE:
            raise ValueError(f"token_probs must be [S, {VOCAB_SIZE}], got {pd.shape}")
        sums = pd.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-3):
            raise ValueError("token_probs rows must each sum to 1")
        if mask is None:
            mask = np.ones(pd.shape[0], dtype=np.float32)
        if self.arch == "bigram_logistic":
            active = int(mask.sum())
            uni = T.scale(T.tsum(T.mul_const(token_probs, mask[:, None]), axis=0), 1.0 / active)
            # expected bigrams over the unpadded prefix only
            prefix = token_probs if active == pd.shape[0] else _slice_rows(token_probs, active)
            bi = _soft_bigram_freq(prefix)
            feats = T.reshape(T.concat([uni, bi], axis=-1), (1, VOCAB_SIZE + _BIGRAM_BUCKETS))
            logit = self.out(feats)
        else:
            emb = T.matmul(token_probs, self.embed)  # expected embedding per position
            s, e = emb.shape
            logit = self._logits_from_embeddings(T.reshape(emb, (1, s, e)), mask[None, :])
        return T.reshape(T.sigmoid(logit), ())

    def score_soft_batch(self, token_probs: T.Tensor, mask: np.ndarray) -> T.Tensor:
        """[B, S, V] distributions -> [B] differentiable scores."""
        if self.arch == "bigram_logistic":
            feats = _soft_count_features_batch(token_probs, mask)
            logit = self.out(feats)
            return T.sigmoid(T.reshape(logit, (logit.shape[0],)))
        emb = T.matmul(token_probs, self.embed)
        return T.sigmoid(self._logits_from_embeddings(emb, mask))


def _slice_rows(x: T.Tensor, n: int) -> T.Tensor:
    s, v = x.shape
    t = T.transpose(x, (1, 0))
    t = T.slice_last(t, 0, n)
    return T.transpose(t, (1, 0))


# sorted-bucket permutation so expected bigram counts reduce via one reduceat
_BUCKET_PERM = np.argsort(_BUCKETS.ravel(), kind="stable")
_BUCKET_SORTED = _BUCKETS.ravel()[_BUCKET_PERM]
_BUCKET_STARTS = np.searchsorted(_BUCKET_SORTED, np.arange(_BIGRAM_BUCKETS))


def _soft_count_features_batch(token_probs: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Expected unigram + hashed-bigram frequencies of [B, S, V] distributions.

    The bigram expectation is one batched gemm (p_prev^T @ p_next per sample)
    followed by a bucket reduction over the sorted hash permutation.
    """
    pd = token_probs.data
    b, s, v = pd.shape
    pair_mask = (mask[:, :-1] * mask[:, 1:]).astype(np.float32)       # [B, S-1]
    n_tok = np.maximum(mask.sum(axis=1), 1.0).astype(np.float32)
    n_pair = np.maximum(pair_mask.sum(axis=1), 1.0).astype(np.float32)

    masked = pd * mask[:, :, None]
    uni = masked.sum(axis=1) / n_tok[:, None]                         # [B, V]
    pn = pd[:, :-1] * pair_mask[:, :, None]
    pm = np.ascontiguousarray(pd[:, 1:])
    # strided 3-d views knock numpy off the gemm fast path; keep everything
    # contiguous and loop the per-sample 2-d products explicitly
    m = np.empty((b, v, v), dtype=np.float32)
    for i in range(b):
        np.dot(pn[i].T, pm[i], out=m[i])
    flat = m.reshape(b, v * v)[:, _BUCKET_PERM]
    counts = np.add.reduceat(flat, _BUCKET_STARTS, axis=1) / n_pair[:, None]
    feats = np.concatenate([uni, counts], axis=1).astype(np.float32)

    def backward(g):
        gu = g[:, :v]
        gc = np.ascontiguousarray(g[:, v:]) / n_pair[:, None]
        gp = (gu / n_tok[:, None])[:, None, :] * mask[:, :, None]
        gm = np.ascontiguousarray(gc[:, _BUCKETS.reshape(-1)].reshape(b, v, v))
        for i in range(b):
            gp[i, :-1] += (gm[i] @ pm[i].T).T * pair_mask[i, :, None]
            gp[i, 1:] += pn[i] @ gm[i]
        return (gp.astype(np.float32),)

    return T._emit((token_probs,), feats, backward)


# count-feature logistic heads need a longer, hotter schedule than the
# embedding architectures to produce confidently calibrated probabilities
_ARCH_TRAIN_DEFAULTS = {
    "meanpool_mlp": (400, 3e-3),
    "attention": (400, 3e-3),
    "bigram_logistic": (1500, 1e-2),
}


def train_detector(pairs, arch: str, seed: int, steps: int | None = None,
                   batch_size: int = 64, lr: float | None = None,
                   holdout_frac: float = 0.1, min_accuracy: float = 0.8) -> ToyDetector:
    """Fit a detector on (machine=1, human=0) sequences; freeze it afterwards.

    Raises DetectorTrainingError if held-out accuracy lands below min_accuracy
    (a sign the style generator or corpus wiring is broken).
    """
    det = ToyDetector(arch, seed)
    default_steps, default_lr = _ARCH_TRAIN_DEFAULTS[arch]
    steps = default_steps if steps is None else steps
    lr = default_lr if lr is None else lr
    rng = stream(seed, "detector-train", arch)
    sequences = [(p.ai_seq.ids, 1.0) for p in pairs] + [(p.human_seq.ids, 0.0) for p in pairs]
    order = rng.permutation(len(sequences))
    n_hold = max(int(len(sequences) * holdout_frac), 2)
    hold = [sequences[i] for i in order[:n_hold]]
    train = [sequences[i] for i in order[n_hold:]]
    if not any(y == 1.0 for _, y in train) or not any(y == 0.0 for _, y in train):
        raise DetectorTrainingError("training corpus must contain both styles")

    params = det.named_params()
    opt = AdamW(params, lr=lr)
    for step in range(steps):
        idx = rng.integers(0, len(train), size=batch_size)
        seqs = [train[i][0] for i in idx]
        ys = np.array([train[i][1] for i in idx], dtype=np.float32)
        ids, mask = pad_batch(seqs)
        with T.Tape() as tape:
            logits = det.logits_batch(ids, mask)
            # binary cross-entropy with logits: softplus(l) - y*l
            loss = T.tmean(T.sub(T.softplus(logits), T.mul_const(logits, ys)))
            tape.backward(loss)
        opt.step()
        opt.zero_grad()

    acc = _accuracy(det, hold)
    det.holdout_accuracy = acc
    if acc < min_accuracy:
        raise DetectorTrainingError(
            f"detector ({arch}, seed {seed}) reached only {acc:.1%} held-out accuracy")
    det.freeze()
    return det


def _accuracy(det: ToyDetector, labelled: list[tuple[np.ndarray, float]]) -> float:
    probs = det.score_many([s for s, _ in labelled])
    preds = (probs > 0.5).astype(np.float32)
    ys = np.array([y for _, y in labelled], dtype=np.float32)
    return float((preds == ys).mean())


def save_detector(path, det: ToyDetector, extra_meta: dict | None = None) -> None:
    from .checkpointio import save_checkpoint

    meta = {"kind": "detector", "arch": det.arch, "seed": det.seed,
            "frozen": det.frozen, "holdout_accuracy": det.holdout_accuracy}
    meta.update(extra_meta or {})
    save_checkpoint(path, meta, {k: v.data for k, v in det.named_params().items()})


def load_detector(path) -> tuple[ToyDetector, dict]:
    from .checkpointio import assign_params, load_checkpoint

    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    det = ToyDetector(meta["arch"], meta["seed"])
    assign_params(det.named_params(), arrays)
    det.holdout_accuracy = meta.get("holdout_accuracy")
    if meta.get("frozen"):
        det.freeze()
    return det, meta
