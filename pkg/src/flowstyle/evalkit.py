"""Evaluation metrics and reporting: detector evasion rates, pooled-encoder
semantic similarity, neutral-LM perplexity, a token-substitution baseline,
gamma sweeps, and CSV/table emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import vocab as V
from .conditioning import SemanticEncoder, TinyLM
from .corpus import StylePair
from .embedding import TokenSequence, pad_batch
from .model import StyleTransferModel
from .sampler import SamplerConfig, sdedit_batch


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def evade_rate(scores, tau: float) -> float:
    """Percentage of scores strictly below the detection threshold."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("evade rate of an empty score list is undefined")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("detector scores must lie in [0, 1]")
    return float(100.0 * (arr < tau).mean())


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def semantic_sim(encoder: SemanticEncoder, a: TokenSequence, b: TokenSequence) -> float:
    """Cosine of pad-masked mean split-layer hidden states."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot compute similarity of an empty sequence")
    ids, mask = pad_batch([a.ids, b.ids])
    pooled = encoder.pooled(ids, mask)
    return _cosine(pooled[0], pooled[1])


def pooled_many(encoder: SemanticEncoder, seqs: list[TokenSequence],
                batch_size: int = 128) -> np.ndarray:
    outs = []
    for lo in range(0, len(seqs), batch_size):
        batch = seqs[lo:lo + batch_size]
        ids, mask = pad_batch([s.ids for s in batch])
        outs.append(encoder.pooled(ids, mask))
    return np.concatenate(outs, axis=0)


def similarities(encoder: SemanticEncoder, src: list[TokenSequence],
                 out: list[TokenSequence]) -> np.ndarray:
    pa = pooled_many(encoder, src)
    pb = pooled_many(encoder, out)
    na = np.linalg.norm(pa, axis=1)
    nb = np.linalg.norm(pb, axis=1)
    denom = np.maximum(na * nb, 1e-12)
    return (pa * pb).sum(axis=1) / denom


def mean_similarity(encoder: SemanticEncoder, src: list[TokenSequence],
                    out: list[TokenSequence]) -> float:
    return float(similarities(encoder, src, out).mean())


def perplexity(lm: TinyLM, seq: TokenSequence) -> float:
    """exp(mean next-token NLL), pad-masked; needs at least two tokens."""
    if len(seq) < 2:
        raise ValueError("perplexity needs a sequence of length >= 2")
    return float(perplexities(lm, [seq])[0])


def perplexities(lm: TinyLM, seqs: list[TokenSequence], batch_size: int = 128) -> np.ndarray:
    if any(len(s) < 2 for s in seqs):
        raise ValueError("perplexity needs sequences of length >= 2")
    out = []
    for lo in range(0, len(seqs), batch_size):
        batch = seqs[lo:lo + batch_size]
        ids, mask = pad_batch([s.ids for s in batch])
        with T.no_grad():
            logits = lm.logits(ids[:, :-1], mask[:, :-1]).data
        targets = ids[:, 1:]
        tmask = (targets != lm.cfg.pad_id) & (mask[:, :-1] > 0)
        m = logits.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))).squeeze(-1)
        picked = np.take_along_axis(logits, targets[..., None], axis=-1).squeeze(-1)
        nll = (lse - picked) * tmask
        per_seq = nll.sum(axis=1) / np.maximum(tmask.sum(axis=1), 1)
        out.append(np.exp(per_seq))
    return np.concatenate(out)


def baseline_substitute(seq: TokenSequence, rate: float, rng: np.random.Generator) -> TokenSequence:
    """Swap content tokens for synonym-group mates with the given probability;
    structure tokens are untouched."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"substitution rate must lie in [0, 1], got {rate}")
    out = seq.ids.copy()
    for i, tok in enumerate(out):
        if V.is_content(int(tok)) and rng.random() < rate:
            mates = [m for m in V.synonym_group(int(tok)) if m != tok]
            out[i] = mates[int(rng.integers(0, len(mates)))]
    return TokenSequence(out)


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            sel = v == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom else 0.0


# ---------------------------------------------------------------------------
# transfer + aggregate evaluation
# ---------------------------------------------------------------------------

def transfer_pairs(model: StyleTransferModel, pairs: list[StylePair],
                   encoder: SemanticEncoder | None, gamma: float, steps: int = 16,
                   use_condition: bool = True, seed: int = 0,
                   batch_size: int = 64, gamma_min: float = -4.0) -> list[TokenSequence]:
    """Transfer the machine side of every pair at one noise level; batched."""
    cfg = SamplerConfig(gamma, gamma_min, steps, seed=seed)
    outputs: list[TokenSequence] = []
    with T.no_grad():
        for lo in range(0, len(pairs), batch_size):
            batch = pairs[lo:lo + batch_size]
            seqs = [p.ai_seq.ids for p in batch]
            ids, mask = pad_batch(seqs)
            bundle = None
            if use_condition and encoder is not None:
                hidden = encoder.encode(ids, mask)
                bundle = model.condition_from_hidden(hidden, mask)
            out_ids, _, _ = sdedit_batch(model, ids, mask, cfg, bundle,
                                         sample_indices=np.arange(lo, lo + len(batch)))
            for row, seq in zip(out_ids, seqs):
                outputs.append(TokenSequence(row[: len(seq)]))
    return outputs


@dataclass
class EvalReport:
    gamma: float | None
    n_samples: int
    p_ai: dict[str, float]
    evade50: dict[str, float]
    evade30: dict[str, float]
    similarity: float | None
    ppl: float

    def __post_init__(self):
        for name in self.evade50:
            if self.evade30[name] > self.evade50[name] + 1e-9:
                raise ValueError("evade@0.3 cannot exceed evade@0.5")


@dataclass
class SweepResult:
    entries: list[tuple[float, EvalReport]]

    def __post_init__(self):
        gammas = [g for g, _ in self.entries]
        if sorted(gammas) != gammas or len(set(gammas)) != len(gammas):
            raise ValueError("sweep gammas must be strictly increasing")

    def gammas(self) -> list[float]:
        return [g for g, _ in self.entries]

    def metric_curve(self, detector_name: str, metric: str = "p_ai") -> list[float]:
        return [getattr(r, metric)[detector_name] if metric in ("p_ai", "evade50", "evade30")
                else getattr(r, metric) for _, r in self.entries]


def score_outputs(detectors: dict[str, object], outputs: list[TokenSequence]) -> dict[str, np.ndarray]:
    return {name: det.score_many([o.ids for o in outputs]) for name, det in detectors.items()}


def report_from_outputs(gamma: float | None, detectors: dict[str, object],
                        encoder: SemanticEncoder | None, lm: TinyLM,
                        sources: list[TokenSequence], outputs: list[TokenSequence]) -> EvalReport:
    score_map = score_outputs(detectors, outputs)
    sim = mean_similarity(encoder, sources, outputs) if encoder is not None else None
    ppl = float(perplexities(lm, outputs).mean())
    return EvalReport(
        gamma=gamma,
        n_samples=len(outputs),
        p_ai={k: float(v.mean()) for k, v in score_map.items()},
        evade50={k: evade_rate(v, 0.5) for k, v in score_map.items()},
        evade30={k: evade_rate(v, 0.3) for k, v in score_map.items()},
        similarity=sim,
        ppl=ppl,
    )


def run_eval(model: StyleTransferModel, detectors: dict[str, object],
             encoder: SemanticEncoder | None, lm: TinyLM, pairs: list[StylePair],
             gamma: float, steps: int = 16, use_condition: bool = True,
             seed: int = 0) -> EvalReport:
    _require(model=model, detectors=detectors, lm=lm, pairs=pairs)
    outputs = transfer_pairs(model, pairs, encoder, gamma, steps, use_condition, seed)
    sources = [p.ai_seq for p in pairs]
    return report_from_outputs(gamma, detectors, encoder, lm, sources, outputs)


def run_sweep(model: StyleTransferModel, detectors: dict[str, object],
              encoder: SemanticEncoder | None, lm: TinyLM, pairs: list[StylePair],
              gammas: list[float], steps: int = 16, use_condition: bool = True,
              seed: int = 0) -> SweepResult:
    entries = [(g, run_eval(model, detectors, encoder, lm, pairs, g, steps, use_condition, seed))
               for g in sorted(gammas)]
    return SweepResult(entries)


def reference_rows(detectors: dict[str, object], encoder: SemanticEncoder | None,
                   lm: TinyLM, pairs: list[StylePair], substitute_rate: float = 0.3,
                   seed: int = 0) -> dict[str, EvalReport]:
    """Anchor rows: untouched machine text, human text, substitution baseline."""
    from .rng import stream

    ai = [p.ai_seq for p in pairs]
    human = [p.human_seq for p in pairs]
    rng = stream(seed, "baseline-substitute")
    substituted = [baseline_substitute(s, substitute_rate, rng) for s in ai]
    return {
        "original_ai": report_from_outputs(None, detectors, encoder, lm, ai, ai),
        "human": report_from_outputs(None, detectors, encoder, lm, human, human),
        "substitution": report_from_outputs(None, detectors, encoder, lm, ai, substituted),
    }


def _require(**components) -> None:
    for name, value in components.items():
        if value is None or (isinstance(value, (dict, list)) and not value):
            raise ValueError(f"evaluation requires component {name!r}")


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def emit_sweep_csv(sweep: SweepResult, path: str | Path) -> None:
    """One row per (gamma, detector)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gamma", "detector", "p_ai", "evade50", "evade30", "similarity", "ppl"])
        for gamma, rep in sweep.entries:
            for det in rep.p_ai:
                w.writerow([gamma, det, f"{rep.p_ai[det]:.6f}", f"{rep.evade50[det]:.3f}",
                            f"{rep.evade30[det]:.3f}",
                            "" if rep.similarity is None else f"{rep.similarity:.6f}",
                            f"{rep.ppl:.3f}"])


def emit_pareto_csv(sweep: SweepResult, training_detector: str, path: str | Path,
                    baselines: dict[str, EvalReport] | None = None) -> None:
    """(evasion, similarity) frontier points across gamma, plus baseline points."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "gamma", "evade50", "similarity"])
        for gamma, rep in sweep.entries:
            w.writerow([f"model", gamma, f"{rep.evade50[training_detector]:.3f}",
                        "" if rep.similarity is None else f"{rep.similarity:.6f}"])
        for name, rep in (baselines or {}).items():
            w.writerow([name, "", f"{rep.evade50[training_detector]:.3f}",
                        "" if rep.similarity is None else f"{rep.similarity:.6f}"])


def format_report_table(rows: dict[str, EvalReport], training_detector: str) -> str:
    """Human-readable table over labelled rows (baselines and/or sweep points)."""
    header = f"{'row':<22} {'P_AI':>7} {'Ev@.5':>7} {'Ev@.3':>7} {'Sim':>7} {'PPL':>9}"
    lines = [header, "-" * len(header)]
    for label, rep in rows.items():
        sim = "--" if rep.similarity is None else f"{rep.similarity:.3f}"
        lines.append(f"{label:<22} {rep.p_ai[training_detector]:>7.3f} "
                     f"{rep.evade50[training_detector]:>6.1f}% {rep.evade30[training_detector]:>6.1f}% "
                     f"{sim:>7} {rep.ppl:>9.2f}")
    return "\n".join(lines)


def emit_report_csv(rows: dict[str, EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "gamma", "detector", "p_ai", "evade50", "evade30", "similarity", "ppl"])
        for label, rep in rows.items():
            for det in rep.p_ai:
                w.writerow([label, "" if rep.gamma is None else rep.gamma, det,
                            f"{rep.p_ai[det]:.6f}", f"{rep.evade50[det]:.3f}", f"{rep.evade30[det]:.3f}",
                            "" if rep.similarity is None else f"{rep.similarity:.6f}",
                            f"{rep.ppl:.3f}"])
