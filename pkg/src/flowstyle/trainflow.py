"""Conditional flow-matching training.

Each step embeds both sides of a pair batch, interpolates toward the human
side by a uniform mixing weight, corrupts at a Gumbel-proposed noise level,
and minimizes pad-masked cross-entropy against the human tokens while
attending to frozen encoder states of the machine side. After a warmup, a
detector reward term periodically scores short sampled transfers through
the soft-token relaxation.

Two optimizer groups: the pretrained backbone at its own peak rate and the
newly added parameters (adapters, condition projection) at a higher one;
linear warmup then cosine decay to a shared floor; global-norm clipping.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import DiTConfig
from .checkpointio import assign_params, load_checkpoint, save_checkpoint
from .conditioning import SemanticEncoder, build_condition
from .corpus import StylePair
from .embedding import pad_batch
from .model import StyleTransferModel
from .optim import AdamW, clip_global_norm
from .rng import stream
from .sampler import SamplerConfig, sdedit_batch
from .schedule import GumbelProposal, corrupt_batch
from .vocab import PAD_ID


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite: float):
        super().__init__(f"non-finite loss at step {step}; last finite loss was {last_finite:.4f}")
        self.step = step
        self.last_finite = last_finite


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 32
    lr_backbone: float = 1e-4
    lr_new: float = 5e-4
    warmup_steps: int = 200
    lr_floor: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lambda_det: float = 0.1
    reward_warmup_steps: int = 1_000
    reward_every: int = 10
    reward_gamma: float = 3.0
    reward_steps: int = 4
    gamma_min: float = -4.0
    gumbel_mu: float = 0.0
    gumbel_beta: float = 2.0
    use_condition: bool = True
    checkpoint_every: int = 2_000
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_backbone, self.lr_new) <= 0:
            raise ValueError("learning rates must be positive")
        if self.reward_warmup_steps > self.steps:
            raise ValueError("reward warmup cannot exceed total steps")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2_000
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 100
    lr_floor: float = 1e-6
    grad_clip: float = 1.0
    gumbel_mu: float = 0.0
    gumbel_beta: float = 2.0
    seed: int = 0


@dataclass
class LossReport:
    step: int
    lr_backbone: float
    lr_new: float
    ce: float
    reward: float | None
    total: float
    grad_norm: float
    p_ai_estimate: float | None = None


def apply_ablation(train_cfg: TrainConfig, split_layer: int, ablation: str,
                   ) -> tuple[TrainConfig, int, str | None]:
    """Resolve an ablation tag into (train config, split layer, domain filter)."""
    if ablation in ("none", ""):
        return train_cfg, split_layer, None
    if ablation == "a1":
        return train_cfg, split_layer, "alpha"
    if ablation == "a2":
        return replace(train_cfg, lambda_det=0.0), split_layer, None
    if ablation == "a3":
        return train_cfg, 1, None
    if ablation == "a4":
        return train_cfg, 3, None
    if ablation == "a5":
        return replace(train_cfg, use_condition=False), split_layer, None
    raise ValueError(f"unknown ablation {ablation!r}; choose none/a1/a2/a3/a4/a5")


def lr_at(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """Learning rates at an integer step: linear warmup then cosine to the floor."""
    if step < 0:
        raise ValueError("step must be non-negative")

    def shape(peak: float) -> float:
        if step <= cfg.warmup_steps:
            return peak * step / cfg.warmup_steps
        span = max(cfg.steps - cfg.warmup_steps, 1)
        frac = min((step - cfg.warmup_steps) / span, 1.0)
        return cfg.lr_floor + (peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))

    return shape(cfg.lr_backbone), shape(cfg.lr_new)


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------

class PairBatcher:
    """Deterministic epoch shuffling plus cached frozen-encoder states."""

    def __init__(self, pairs: list[StylePair], encoder: SemanticEncoder | None,
                 seed: int, cache_dtype=np.float16):
        if not pairs:
            raise ValueError("training corpus is empty")
        self.pairs = pairs
        self.ai_ids = [p.ai_seq.ids for p in pairs]
        self.hu_ids = [p.human_seq.ids for p in pairs]
        self.order_rng = stream(seed, "data-order")
        self._queue: list[int] = []
        self.cond_cache: list[np.ndarray] | None = None
        if encoder is not None:
            self.cond_cache = self._build_cache(encoder, cache_dtype)

    def _build_cache(self, encoder: SemanticEncoder, dtype) -> list[np.ndarray]:
        cache: list[np.ndarray] = []
        chunk = 128
        for lo in range(0, len(self.ai_ids), chunk):
            batch = self.ai_ids[lo:lo + chunk]
            ids, mask = pad_batch(batch)
            hidden = encoder.encode(ids, mask)
            for row, seq in zip(hidden, batch):
                cache.append(row[: len(seq)].astype(dtype))
        return cache

    def next_indices(self, n: int) -> np.ndarray:
        out: list[int] = []
        while len(out) < n:
            if not self._queue:
                self._queue = list(self.order_rng.permutation(len(self.pairs)))
            out.append(self._queue.pop())
        return np.asarray(out, dtype=np.int64)

    def padded_condition(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cached hiddens for the chosen pairs, padded: [B, S_q, enc] + mask."""
        assert self.cond_cache is not None
        rows = [self.cond_cache[i] for i in idx]
        s_q = max(r.shape[0] for r in rows)
        width = rows[0].shape[1]
        hidden = np.zeros((len(rows), s_q, width), dtype=np.float32)
        mask = np.zeros((len(rows), s_q), dtype=np.float32)
        for j, r in enumerate(rows):
            hidden[j, : r.shape[0]] = r.astype(np.float32)
            mask[j, : r.shape[0]] = 1.0
        return hidden, mask


def make_batch(batcher: PairBatcher, idx: np.ndarray, model: StyleTransferModel,
               proposal: GumbelProposal, t_rng: np.random.Generator,
               gamma_rng: np.random.Generator, noise_rng: np.random.Generator):
    """Build one training batch: latents, targets, masks, and condition bundle."""
    ai = [batcher.ai_ids[i] for i in idx]
    hu = [batcher.hu_ids[i] for i in idx]
    s = max(max(len(a), len(h)) for a, h in zip(ai, hu))
    ai_pad, _ = pad_batch(ai, length=s)
    hu_pad, _ = pad_batch(hu, length=s)
    active = np.zeros((len(idx), s), dtype=np.float32)
    for j, (a, h) in enumerate(zip(ai, hu)):
        active[j, : max(len(a), len(h))] = 1.0

    ts = t_rng.random(len(idx)).astype(np.float32)
    gammas = proposal.sample_n(gamma_rng, len(idx))
    eps = noise_rng.standard_normal((len(idx), s, model.cfg.dim)).astype(np.float32)

    e_ai = model.embedding.embed_ids(ai_pad)
    e_hu = model.embedding.embed_ids(hu_pad)
    w = ts[:, None, None]
    interp = T.add(T.mul_const(e_ai, 1.0 - w), T.mul_const(e_hu, w))
    z = corrupt_batch(interp, gammas, T.Tensor(eps))

    bundle = None
    if batcher.cond_cache is not None:
        hidden, kv_mask = batcher.padded_condition(idx)
        bundle = build_condition(model.proj, hidden, kv_mask)
    return z, gammas, hu_pad, active, bundle, ai


def ce_loss(model: StyleTransferModel, z: T.Tensor, gammas: np.ndarray, bundle,
            targets: np.ndarray, active: np.ndarray) -> T.Tensor:
    logits = model.forward(z, gammas, bundle, active)
    return T.cross_entropy(logits, targets, pad_id=model.cfg.pad_id)


def reward_loss(model: StyleTransferModel, detector, ai_seqs: list[np.ndarray],
                cfg: TrainConfig, step: int,
                cond_hidden: np.ndarray | None = None) -> T.Tensor:
    """Mean soft detector score of short sampled transfers of the batch sources.

    Only the final readout forward is differentiated; the walk itself runs
    untracked. The caller must hold an active tape. `cond_hidden` carries the
    frozen encoder states of the sources, padded to the batch length.
    """
    if step < cfg.reward_warmup_steps:
        raise RuntimeError(f"reward requested at step {step}, before warmup {cfg.reward_warmup_steps}")
    ids, mask = pad_batch(ai_seqs)
    bundle = None
    if cfg.use_condition:
        if cond_hidden is None:
            raise ValueError("conditional reward needs the sources' encoder states")
        bundle = build_condition(model.proj, cond_hidden, mask)
    reward_seed = (cfg.seed * 1_000_003 + step) % (2 ** 31)
    scfg = SamplerConfig(cfg.reward_gamma, cfg.gamma_min, cfg.reward_steps, seed=reward_seed)
    _, final_logits, _ = sdedit_batch(model, ids, mask, scfg, bundle, grad_final=True)
    probs = T.softmax(final_logits, axis=-1)
    scores = detector.score_soft_batch(probs, mask)
    return T.tmean(scores)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _collect_opt_arrays(tag: str, opt: AdamW) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.params:
        out[f"opt.{tag}.m.{name}"] = opt.state.m[name]
        out[f"opt.{tag}.v.{name}"] = opt.state.v[name]
    return out


def save_train_checkpoint(path: Path, model: StyleTransferModel, step: int,
                          fingerprint: str, opts: dict[str, AdamW],
                          rng_states: dict[str, dict]) -> None:
    arrays = {f"param.{k}": v.data for k, v in model.named_params().items()}
    for tag, opt in opts.items():
        arrays.update(_collect_opt_arrays(tag, opt))
    meta = {
        "kind": "model",
        "step": step,
        "fingerprint": fingerprint,
        "model_config": asdict(model.cfg),
        "opt_steps": {tag: opt.state.step_count for tag, opt in opts.items()},
        "rng_states": rng_states,
    }
    save_checkpoint(path, meta, arrays)


def load_model(path: str | Path) -> tuple[StyleTransferModel, dict]:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = DiTConfig(**meta["model_config"])
    model = StyleTransferModel(cfg, seed=0)
    params = {f"param.{k}": v for k, v in model.named_params().items()}
    model_arrays = {k: v for k, v in arrays.items() if k.startswith("param.")}
    assign_params(params, model_arrays)
    return model, meta


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def pretrain_backbone(cfg: PretrainConfig, pairs: list[StylePair],
                      model: StyleTransferModel, log_every: int = 200,
                      progress=None) -> list[float]:
    """Unconditional denoising of the human side; trains the backbone group only."""
    proposal = GumbelProposal(cfg.gumbel_mu, cfg.gumbel_beta)
    batcher = PairBatcher(pairs, None, cfg.seed)
    t_rng = stream(cfg.seed, "pretrain-t")
    gamma_rng = stream(cfg.seed, "pretrain-gamma")
    noise_rng = stream(cfg.seed, "pretrain-noise")
    backbone = model.param_groups()["backbone"]
    opt = AdamW(backbone, lr=cfg.lr)
    losses: list[float] = []
    train_like = TrainConfig(steps=cfg.steps, warmup_steps=cfg.warmup_steps,
                             lr_backbone=cfg.lr, lr_new=cfg.lr, lr_floor=cfg.lr_floor,
                             reward_warmup_steps=0)
    for step in range(cfg.steps):
        idx = batcher.next_indices(cfg.batch_size)
        hu = [batcher.hu_ids[i] for i in idx]
        ids, active = pad_batch(hu)
        gammas = proposal.sample_n(gamma_rng, len(idx))
        eps = noise_rng.standard_normal((len(idx), ids.shape[1], model.cfg.dim)).astype(np.float32)
        lr, _ = lr_at(step + 1, train_like)
        with T.Tape() as tape:
            e_hu = model.embedding.embed_ids(ids)
            z = corrupt_batch(e_hu, gammas, T.Tensor(eps))
            loss = ce_loss(model, z, gammas, None, ids, active)
            tape.backward(loss)
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(step, losses[-1] if losses else float("nan"))
        clip_global_norm(backbone, cfg.grad_clip)
        opt.step(lr)
        opt.zero_grad()
        losses.append(val)
        if progress and step % log_every == 0:
            progress(step, val)
    return losses


def train(cfg: TrainConfig, pairs: list[StylePair], model: StyleTransferModel,
          detector, encoder: SemanticEncoder | None, out_dir: str | Path,
          fingerprint: str = "", progress=None) -> dict:
    """Main conditional training loop; writes metrics CSV and checkpoints.

    Returns {"checkpoints": [paths], "final": path, "reports": [LossReport]}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.use_condition and encoder is None:
        raise ValueError("conditional training requires a frozen encoder")

    proposal = GumbelProposal(cfg.gumbel_mu, cfg.gumbel_beta)
    batcher = PairBatcher(pairs, encoder if cfg.use_condition else None, cfg.seed)
    t_rng = stream(cfg.seed, "train-t")
    gamma_rng = stream(cfg.seed, "train-gamma")
    noise_rng = stream(cfg.seed, "train-noise")

    groups = model.param_groups()
    all_params = {**groups["backbone"], **groups["new"]}
    opt_b = AdamW(groups["backbone"], lr=cfg.lr_backbone, weight_decay=cfg.weight_decay)
    opt_n = AdamW(groups["new"], lr=cfg.lr_new, weight_decay=cfg.weight_decay)

    reports: list[LossReport] = []
    checkpoints: list[Path] = []
    last_finite = float("nan")

    for step in range(cfg.steps):
        idx = batcher.next_indices(cfg.batch_size)
        z, gammas, targets, active, bundle, ai_seqs = make_batch(
            batcher, idx, model, proposal, t_rng, gamma_rng, noise_rng)
        lr_b, lr_n = lr_at(step + 1, cfg)
        reward_active = (cfg.lambda_det > 0 and step >= cfg.reward_warmup_steps
                         and step % cfg.reward_every == 0)
        with T.Tape() as tape:
            ce = ce_loss(model, z, gammas, bundle, targets, active)
            reward_val = None
            if reward_active:
                cond_hidden = batcher.padded_condition(idx)[0] if cfg.use_condition else None
                reward = reward_loss(model, detector, ai_seqs, cfg, step, cond_hidden)
                total = T.add(ce, T.scale(reward, cfg.lambda_det))
                reward_val = reward.item()
            else:
                total = ce
            tape.backward(total)

        total_val = total.item()
        if not math.isfinite(total_val):
            raise TrainingDiverged(step, last_finite)
        last_finite = total_val

        grad_norm = clip_global_norm(all_params, cfg.grad_clip)
        opt_b.step(lr_b)
        opt_n.step(lr_n)
        model.zero_grad()

        reports.append(LossReport(step, lr_b, lr_n, ce.item(), reward_val, total_val,
                                  grad_norm, reward_val))
        if progress and step % 200 == 0:
            progress(step, total_val)

        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = out_dir / f"ckpt_{step + 1:06d}.bin"
            save_train_checkpoint(path, model, step + 1, fingerprint,
                                  {"backbone": opt_b, "new": opt_n},
                                  {"t": _rng_state(t_rng), "gamma": _rng_state(gamma_rng),
                                   "noise": _rng_state(noise_rng)})
            checkpoints.append(path)

    final = out_dir / "ckpt_final.bin"
    save_train_checkpoint(final, model, cfg.steps, fingerprint,
                          {"backbone": opt_b, "new": opt_n},
                          {"t": _rng_state(t_rng), "gamma": _rng_state(gamma_rng),
                           "noise": _rng_state(noise_rng)})
    if not checkpoints or checkpoints[-1] != final:
        checkpoints.append(final)
    write_metrics_csv(out_dir / "metrics.csv", reports)
    return {"checkpoints": checkpoints, "final": final, "reports": reports}


def write_metrics_csv(path: Path, reports: list[LossReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "lr_backbone", "lr_new", "ce", "reward", "total", "grad_norm"])
        for r in reports:
            writer.writerow([r.step, f"{r.lr_backbone:.3e}", f"{r.lr_new:.3e}",
                             f"{r.ce:.6f}", "" if r.reward is None else f"{r.reward:.6f}",
                             f"{r.total:.6f}", f"{r.grad_norm:.6f}"])


# ---------------------------------------------------------------------------
# checkpoint selection
# ---------------------------------------------------------------------------

def composite_score(p_ai: float, sim: float) -> float:
    return (1.0 - p_ai) * 0.6 + sim * 0.4


def select_checkpoint(candidate_paths: list[str | Path], eval_pairs: list[StylePair],
                      detector, encoder: SemanticEncoder | None, gamma: float,
                      sampler_steps: int = 16, n_samples: int = 50,
                      use_condition: bool = True) -> tuple[Path, list[dict]]:
    """Composite-score sweep over saved checkpoints on a small eval subset.

    Returns (winning path, per-candidate rows); ties go to the earliest step.
    """
    if not candidate_paths:
        raise ValueError("no candidate checkpoints given")
    subset = eval_pairs[:n_samples]
    rows: list[dict] = []
    best_path: Path | None = None
    best_score, best_step = -1.0, 0
    for path in candidate_paths:
        model, meta = load_model(path)
        p_ai, sim = _eval_subset(model, subset, detector, encoder, gamma,
                                 sampler_steps, use_condition)
        score = composite_score(p_ai, sim)
        rows.append({"path": str(path), "step": meta["step"], "p_ai": p_ai,
                     "sim": sim, "composite": score})
        if best_path is None or score > best_score or (score == best_score and meta["step"] < best_step):
            best_path, best_score, best_step = Path(path), score, meta["step"]
    return best_path, rows


def _eval_subset(model, subset, detector, encoder, gamma, steps, use_condition):
    from .evalkit import transfer_pairs, mean_similarity  # local import to avoid a cycle

    outputs = transfer_pairs(model, subset, encoder, gamma, steps,
                             use_condition=use_condition, seed=0)
    scores = detector.score_many([o.ids for o in outputs])
    sims = mean_similarity(encoder, [p.ai_seq for p in subset], outputs)
    return float(scores.mean()), float(sims)
