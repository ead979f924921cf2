"""Greedy document-level scheduling of rewrites toward a target detection rate.

Split the document into bounded chunks, score each, and while the
length-weighted average score sits above target + tolerance: pick the
highest-scoring chunk (ties to the lowest index), try the escalating gamma
ladder, accept the first rewrite that strictly lowers that chunk's score,
and re-aggregate. Stop early once the aggregate overshoots below
target - tolerance. A chunk that no ladder value improves is marked
exhausted and never reselected, which guarantees termination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embedding import TokenSequence

RewriteFn = Callable[[np.ndarray, float], np.ndarray]    # (chunk ids, gamma) -> new ids
ScoreFn = Callable[[np.ndarray], float]                  # chunk ids -> p_ai


@dataclass
class Chunk:
    tokens: np.ndarray
    weight: float
    score: float
    rewrites: int = 0

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class AuditPlan:
    target_rate: float
    tolerance: float = 0.02
    ladder: tuple[float, ...] = (3.0, 4.0, 5.0, 6.0)
    chunk_limit: int = 64
    max_iterations: int | None = None   # default 4 * n_chunks

    def __post_init__(self):
        if not 0.0 <= self.target_rate <= 1.0:
            raise ValueError(f"target rate must lie in [0, 1], got {self.target_rate}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if list(self.ladder) != sorted(self.ladder) or len(set(self.ladder)) != len(self.ladder):
            raise ValueError("gamma ladder must be strictly increasing")


@dataclass
class AuditReport:
    achieved: float
    chunks_rewritten: int
    rewrite_ratio: float
    iterations: int
    status: str                       # "ok" | "stalled" | "max_iterations"
    overshoot: bool
    before_scores: list[float]
    after_scores: list[float]
    weights: list[float]
    trace: list[int] = field(default_factory=list)   # chunk index chosen at each iteration

    def recomputed_achieved(self) -> float:
        return float(np.dot(self.weights, self.after_scores))


def segment(doc: TokenSequence, chunk_limit: int) -> list[Chunk]:
    """Contiguous, order-preserving chunks of at most chunk_limit tokens."""
    ids = doc.ids
    if len(ids) == 0:
        raise ValueError("cannot segment an empty document")
    if chunk_limit < 1:
        raise ValueError("chunk limit must be >= 1")
    total = len(ids)
    chunks = [Chunk(ids[lo:lo + chunk_limit].copy(), 0.0, 0.0)
              for lo in range(0, total, chunk_limit)]
    for c in chunks:
        c.weight = len(c) / total
    return chunks


def reassemble(chunks: list[Chunk]) -> TokenSequence:
    return TokenSequence(np.concatenate([c.tokens for c in chunks]))


def weighted_score(chunks: list[Chunk]) -> float:
    return float(sum(c.weight * c.score for c in chunks))


def audit(doc: TokenSequence, plan: AuditPlan, rewriter: RewriteFn,
          scorer: ScoreFn) -> tuple[TokenSequence, AuditReport]:
    chunks = segment(doc, plan.chunk_limit)
    for c in chunks:
        c.score = float(scorer(c.tokens))
    before = [c.score for c in chunks]
    weights = [c.weight for c in chunks]
    max_iter = plan.max_iterations if plan.max_iterations is not None else 4 * len(chunks)

    exhausted: set[int] = set()
    trace: list[int] = []
    iterations = 0
    status = "ok"
    overshoot = False
    s_bar = weighted_score(chunks)

    while s_bar > plan.target_rate + plan.tolerance:
        if iterations >= max_iter:
            status = "max_iterations"
            break
        candidates = [i for i in range(len(chunks)) if i not in exhausted]
        if not candidates:
            status = "stalled"
            break
        j = max(candidates, key=lambda i: (chunks[i].score, -i))
        improved = False
        for gamma in plan.ladder:
            new_tokens = np.asarray(rewriter(chunks[j].tokens, gamma), dtype=np.int64)
            new_score = float(scorer(new_tokens))
            if new_score < chunks[j].score:
                chunks[j].tokens = new_tokens
                chunks[j].score = new_score
                chunks[j].rewrites += 1
                improved = True
                break
        iterations += 1
        trace.append(j)
        if not improved:
            exhausted.add(j)
            continue
        s_bar = weighted_score(chunks)
        if s_bar < plan.target_rate - plan.tolerance:
            overshoot = True
            break

    rewritten = [c for c in chunks if c.rewrites > 0]
    total_tokens = sum(len(c) for c in chunks)
    report = AuditReport(
        achieved=weighted_score(chunks),
        chunks_rewritten=len(rewritten),
        rewrite_ratio=sum(len(c) for c in rewritten) / total_tokens,
        iterations=iterations,
        status=status,
        overshoot=overshoot,
        before_scores=before,
        after_scores=[c.score for c in chunks],
        weights=weights,
        trace=trace,
    )
    return reassemble(chunks), report


def run_audit(doc: TokenSequence, plan: AuditPlan, model, detector, encoder,
              sampler_steps: int = 16, gamma_min: float = -4.0, seed: int = 0,
              use_condition: bool = True) -> tuple[TokenSequence, AuditReport]:
    """Wire the trained transfer model and a frozen detector into the loop."""
    from .sampler import SamplerConfig, sdedit

    def rewriter(tokens: np.ndarray, gamma: float) -> np.ndarray:
        cfg = SamplerConfig(gamma, gamma_min, sampler_steps, seed=seed)
        result = sdedit(model, TokenSequence(tokens), cfg, encoder, use_condition)
        return result.output.ids

    def scorer(tokens: np.ndarray) -> float:
        return detector.score(TokenSequence(tokens)).p_ai

    return audit(doc, plan, rewriter, scorer)
