"""Noise-then-denoise inference: corrupt the source embedding at the chosen
start level, walk the gamma grid with deterministic transport steps, read
out tokens from a final forward pass at the grid floor.

The transport step preserves the inferred noise direction:

    z' = alpha(g') * x0_hat + sigma(g') * (z - alpha(g) * x0_hat) / sigma(g)

so equal consecutive levels are an exact fixed point and the clean limit
collapses onto the predicted embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conditioning import ConditionBundle, SemanticEncoder
from .embedding import TokenSequence, pad_batch
from .model import StyleTransferModel
from .rng import stream
from .schedule import alpha, corrupt, gamma_grid, sigma

_SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class SamplerConfig:
    gamma_start: float
    gamma_min: float = -4.0
    steps: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_start > self.gamma_min:
            raise ValueError(f"gamma_start ({self.gamma_start}) must exceed gamma_min ({self.gamma_min})")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class TransferResult:
    output: TokenSequence
    trace: list[tuple[float, float]]   # (gamma after step, mean latent row norm)
    steps: int


def x0_predict(model: StyleTransferModel, z: T.Tensor, gammas, bundle: ConditionBundle | None,
               mask: np.ndarray | None = None) -> T.Tensor:
    """Probability-weighted mean of normalized vocabulary embeddings: [B, S, d]."""
    probs = T.softmax(model.forward(z, gammas, bundle, mask), axis=-1)
    return T.matmul(probs, model.embedding.normalized_table())


def euler_step(z: T.Tensor, gamma_k: float, gamma_next: float, x0_hat: T.Tensor) -> T.Tensor:
    if gamma_next == gamma_k:
        return z
    s_k = sigma(gamma_k)
    if s_k < _SIGMA_FLOOR:
        raise ValueError(f"sigma({gamma_k}) below {_SIGMA_FLOOR}; grid starts too far into the clean regime")
    a_k, a_n, s_n = alpha(gamma_k), alpha(gamma_next), sigma(gamma_next)
    residual = T.scale(T.sub(z, T.scale(x0_hat, a_k)), 1.0 / s_k)
    return T.add(T.scale(x0_hat, a_n), T.scale(residual, s_n))


def _noise_for(seed: int, index: int, s: int, d: int, s_max: int) -> np.ndarray:
    """Per-sample initial noise, independent of batch composition."""
    draw = stream(seed, "sdedit-noise", index).standard_normal((s_max, d))
    return draw[:s].astype(np.float32)


def sdedit_batch(model: StyleTransferModel, ids: np.ndarray, mask: np.ndarray,
                 cfg: SamplerConfig, bundle: ConditionBundle | None,
                 sample_indices: np.ndarray | None = None,
                 grad_final: bool = False):
    """Run the denoising loop on a padded [B, S] batch.

    Returns (output ids [B, S], final logits Tensor, traces). With
    `grad_final`, the walk is untracked but the final readout forward runs
    on the active tape (the reward path differentiates through it).
    """
    b, s = ids.shape
    d = model.cfg.dim
    if s > model.cfg.s_max:
        raise ValueError(f"sequence length {s} exceeds s_max {model.cfg.s_max}")
    if sample_indices is None:
        sample_indices = np.arange(b)
    grid = gamma_grid(cfg.gamma_start, cfg.gamma_min, cfg.steps)

    eps = np.stack([_noise_for(cfg.seed, int(i), s, d, model.cfg.s_max) for i in sample_indices])
    traces: list[list[tuple[float, float]]] = [[] for _ in range(b)]

    with T.no_grad():
        e_src = model.embedding.embed_ids(ids)
        z = corrupt(e_src, cfg.gamma_start, T.Tensor(eps))
        for k in range(cfg.steps):
            g_k, g_next = grid.values[k], grid.values[k + 1]
            x0 = x0_predict(model, z, g_k, bundle, mask)
            z = euler_step(z, g_k, g_next, x0)
            norms = np.linalg.norm(z.data, axis=-1)
            denom = np.maximum(mask.sum(axis=1), 1.0)
            mean_norm = (norms * mask).sum(axis=1) / denom
            for i in range(b):
                traces[i].append((g_next, float(mean_norm[i])))
        z_final = T.Tensor(z.data.copy())

    if grad_final:
        final_logits = model.forward(z_final, cfg.gamma_min, bundle, mask)
    else:
        with T.no_grad():
            final_logits = model.forward(z_final, cfg.gamma_min, bundle, mask)
    out_ids = np.argmax(final_logits.data, axis=-1)
    return out_ids, final_logits, traces


def sdedit(model: StyleTransferModel, src: TokenSequence, cfg: SamplerConfig,
           encoder: SemanticEncoder | None = None, use_condition: bool = True,
           sample_index: int = 0) -> TransferResult:
    """Transfer one sequence; conditions on the source at every step when an
    encoder is supplied."""
    if len(src) == 0:
        raise ValueError("cannot transfer an empty sequence")
    if len(src) > model.cfg.s_max:
        raise ValueError(f"input length {len(src)} exceeds s_max {model.cfg.s_max}")
    ids, mask = pad_batch([src.ids])
    bundle = None
    if use_condition and encoder is not None:
        hidden = encoder.encode(ids, mask)
        with T.no_grad():
            bundle = model.condition_from_hidden(hidden, mask)
    out_ids, _, traces = sdedit_batch(model, ids, mask, cfg, bundle,
                                      sample_indices=np.array([sample_index]))
    return TransferResult(TokenSequence(out_ids[0][: len(src)]), traces[0], cfg.steps)
