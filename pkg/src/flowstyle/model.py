"""The full style-transfer denoiser: vocabulary embedding, modulated
transformer trunk with optional cross-attention adapters, zero-initialized
final head, and the logit skip path.

Parameter groups: everything that exists in the unconditional pretrained
model is "backbone"; the adapters and the condition projection are "new".
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import DiTBlock, DiTConfig, FinalHead, TimestepEmbedder
from .conditioning import ConditionBundle, CrossAttnAdapter, build_condition
from .embedding import VocabEmbedding
from .layers import Linear, RoPECache, key_padding_bias
from .rng import stream


class StyleTransferModel:
    def __init__(self, cfg: DiTConfig, seed: int = 0):
        self.cfg = cfg
        init = stream(seed, "init")
        self.embedding = VocabEmbedding(cfg.dim, init, cfg.vocab_size, cfg.pad_id)
        self.timestep = TimestepEmbedder(cfg, init)
        self.adapters = [CrossAttnAdapter(cfg.dim, cfg.heads, init) for _ in range(cfg.n_blocks)]
        self.blocks = [DiTBlock(cfg, init, adapter=self.adapters[i]) for i in range(cfg.n_blocks)]
        self.final = FinalHead(cfg, init)
        self.proj = Linear(cfg.cond_width, cfg.dim, init)
        self.rope = RoPECache(cfg.s_max, cfg.head_dim)

    # ---- parameters ----

    def param_groups(self) -> dict[str, dict[str, T.Tensor]]:
        backbone: dict[str, T.Tensor] = {}
        backbone.update(self.embedding.named_params("embed"))
        backbone.update(self.timestep.named_params("timestep"))
        for i, blk in enumerate(self.blocks):
            backbone.update(blk.named_params(f"block{i}"))
        backbone.update(self.final.named_params("final"))

        new: dict[str, T.Tensor] = {}
        for i, ad in enumerate(self.adapters):
            new.update(ad.named_params(f"adapter{i}"))
        new.update(self.proj.named_params("proj"))
        return {"backbone": backbone, "new": new}

    def named_params(self) -> dict[str, T.Tensor]:
        groups = self.param_groups()
        return {**groups["backbone"], **groups["new"]}

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    # ---- forward ----

    def forward(self, z: T.Tensor, gammas: float | np.ndarray,
                bundle: ConditionBundle | None = None,
                mask: np.ndarray | None = None) -> T.Tensor:
        """Denoising logits for latents [B, S, d] at per-sample noise levels.

        gammas: scalar (shared) or [B]; mask: [B, S] with 1 on active positions.
        Returns [B, S, V].
        """
        b, s, d = z.shape
        if d != self.cfg.dim:
            raise ValueError(f"latent width {d} does not match model dim {self.cfg.dim}")
        if s > self.cfg.s_max:
            raise ValueError(f"sequence length {s} exceeds s_max {self.cfg.s_max}")
        g = np.full(b, float(gammas)) if np.isscalar(gammas) else np.asarray(gammas, dtype=np.float64)
        if g.shape != (b,):
            raise ValueError(f"gammas shape {g.shape} does not match batch {b}")
        bias = None if mask is None else key_padding_bias(mask)

        c = self.timestep(g)
        x = z
        for blk in self.blocks:
            x = blk(x, c, self.rope, bias, bundle)
        logits = self.final(x, c)
        return T.add(logits, self.embedding.skip_logits_batch(z, g))

    def forward_single(self, z: T.Tensor, gamma: float,
                       bundle: ConditionBundle | None = None) -> T.Tensor:
        """[S, d] latent at one noise level -> [S, V] logits."""
        s, d = z.shape
        out = self.forward(T.reshape(z, (1, s, d)), gamma, bundle)
        return T.reshape(out, (s, self.cfg.vocab_size))

    def condition_from_hidden(self, hidden: np.ndarray, mask: np.ndarray | None = None) -> ConditionBundle:
        return build_condition(self.proj, hidden, mask)
