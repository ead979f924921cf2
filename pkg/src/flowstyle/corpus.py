"""Synthetic two-style parallel corpus.

Every pair shares a content skeleton (a sequence of content tokens). The
"machine" rendering wraps it in a rigid template: opener, a deterministic
rotation of three domain connectors every third content token, closer.
The "human" rendering splices a random 30-80% extra idiom/function tokens
at random positions. The content subsequence is identical on both sides,
so the styles differ only in their decoration statistics.

Skeletons are topical: most content tokens of a pair come from one 16-token
topic cluster, the rest from the domain's wider window. Topic membership is
the learnable "meaning" of a text; a language model fit on the corpus must
represent it to predict content, which is what makes pooled hidden states a
usable semantic-similarity signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vocab as V
from .embedding import TokenSequence
from .rng import stream

DOMAINS = ("alpha", "beta", "gamma")

_SKELETON_MIN, _SKELETON_MAX = 8, 24
_DECOR_MIN, _DECOR_MAX = 0.30, 0.80
_CONN_EVERY = 3
_FN_SHARE = 0.35   # share of human insertions drawn from the shared function pool
_TOPIC_SIZE = 16
_TOPIC_PURITY = 0.85   # share of skeleton tokens drawn from the pair's topic cluster

# per-domain content windows (overlapping 256-token slices of the content range)
_DOMAIN_WINDOW = {
    "alpha": (V.CONTENT_LO, V.CONTENT_LO + 256),
    "beta": (V.CONTENT_LO + 64, V.CONTENT_LO + 320),
    "gamma": (V.CONTENT_LO + 128, V.CONTENT_LO + 384),
}


@dataclass
class StylePair:
    ai_seq: TokenSequence
    human_seq: TokenSequence
    domain: str
    ai_score: float | None = None
    human_score: float | None = None

    def content_skeleton(self, side: str = "ai") -> list[int]:
        seq = self.ai_seq if side == "ai" else self.human_seq
        return [t for t in seq.tolist() if V.is_content(t)]


@dataclass
class CorpusConfig:
    sizes: dict[str, int] = field(default_factory=lambda: {"alpha": 8000, "beta": 1600, "gamma": 500})
    seed: int = 0

    def total(self) -> int:
        return sum(self.sizes.values())


def _render_ai(skeleton: list[int], domain_idx: int) -> np.ndarray:
    conns = [V.AI_CONN_LO + domain_idx * 3 + j for j in range(3)]
    toks = [V.AI_OPEN]
    for i, t in enumerate(skeleton):
        if i and i % _CONN_EVERY == 0:
            toks.append(conns[(i // _CONN_EVERY - 1) % 3])
        toks.append(t)
    toks.append(V.AI_CLOSE)
    return np.array(toks, dtype=np.int64)


def _render_human(skeleton: list[int], rng: np.random.Generator) -> np.ndarray:
    n_add = int(round(len(skeleton) * rng.uniform(_DECOR_MIN, _DECOR_MAX)))
    n_add = max(n_add, 1)
    inserts = []
    for _ in range(n_add):
        if rng.random() < _FN_SHARE:
            inserts.append(int(rng.integers(V.FN_LO, V.FN_HI)))
        else:
            inserts.append(int(rng.integers(V.HUM_MARK_LO, V.HUM_MARK_HI)))
    # choose slots among len(skeleton)+1 gaps, keeping skeleton order intact
    slots = rng.integers(0, len(skeleton) + 1, size=n_add)
    out: list[int] = []
    by_slot: dict[int, list[int]] = {}
    for slot, tok in zip(slots, inserts):
        by_slot.setdefault(int(slot), []).append(tok)
    for i in range(len(skeleton) + 1):
        out.extend(by_slot.get(i, ()))
        if i < len(skeleton):
            out.append(skeleton[i])
    return np.array(out, dtype=np.int64)


def _make_pair(domain: str, pair_rng: np.random.Generator) -> StylePair:
    lo, hi = _DOMAIN_WINDOW[domain]
    length = int(pair_rng.integers(_SKELETON_MIN, _SKELETON_MAX + 1))
    n_topics = (hi - lo) // _TOPIC_SIZE
    topic_lo = lo + int(pair_rng.integers(0, n_topics)) * _TOPIC_SIZE
    skeleton = []
    for _ in range(length):
        if pair_rng.random() < _TOPIC_PURITY:
            skeleton.append(topic_lo + int(pair_rng.integers(0, _TOPIC_SIZE)))
        else:
            skeleton.append(int(pair_rng.integers(lo, hi)))
    ai = _render_ai(skeleton, DOMAINS.index(domain))
    human = _render_human(skeleton, pair_rng)
    return StylePair(TokenSequence(ai), TokenSequence(human), domain)


def generate_pairs(cfg: CorpusConfig) -> list[StylePair]:
    """Deterministic corpus: pair i of a domain uses its own derived stream."""
    pairs: list[StylePair] = []
    for domain in DOMAINS:
        n = cfg.sizes.get(domain, 0)
        for i in range(n):
            pair_rng = stream(cfg.seed, "corpus", domain, i)
            pairs.append(_make_pair(domain, pair_rng))
    return pairs


def score_and_filter(pairs: list[StylePair], detector, thresholds: tuple[float, float] = (0.1, 0.9),
                     ) -> tuple[list[StylePair], dict[str, int]]:
    """Keep pairs whose human side scores below and machine side above threshold.

    Returns (retained pairs with scores filled in, rejection counts by reason).
    """
    human_max, ai_min = thresholds
    kept: list[StylePair] = []
    rejects = {"human side": 0, "ai side": 0, "both sides": 0}
    for p in pairs:
        ai_s = detector.score(p.ai_seq).p_ai if p.ai_score is None else p.ai_score
        hu_s = detector.score(p.human_seq).p_ai if p.human_score is None else p.human_score
        p.ai_score, p.human_score = float(ai_s), float(hu_s)
        bad_h = hu_s >= human_max
        bad_a = ai_s <= ai_min
        if bad_h and bad_a:
            rejects["both sides"] += 1
        elif bad_h:
            rejects["human side"] += 1
        elif bad_a:
            rejects["ai side"] += 1
        else:
            kept.append(p)
    return kept, rejects


# ---------------------------------------------------------------------------
# serialization: one record per line, tab-separated fields
#   ai_ids (space-separated) \t human_ids \t domain \t ai_score \t human_score
# ---------------------------------------------------------------------------

def _fmt_score(s: float | None) -> str:
    return "na" if s is None else repr(float(s))


def _parse_score(s: str) -> float | None:
    return None if s == "na" else float(s)


def save_pairs(pairs: list[StylePair], path: str | Path) -> None:
    lines = []
    for p in pairs:
        lines.append("\t".join([
            " ".join(map(str, p.ai_seq.tolist())),
            " ".join(map(str, p.human_seq.tolist())),
            p.domain,
            _fmt_score(p.ai_score),
            _fmt_score(p.human_score),
        ]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_pairs(path: str | Path) -> list[StylePair]:
    pairs: list[StylePair] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{path}: malformed record at line {lineno}: expected 5 fields, got {len(fields)}")
        try:
            ai = np.array([int(t) for t in fields[0].split()], dtype=np.int64)
            hu = np.array([int(t) for t in fields[1].split()], dtype=np.int64)
            domain = fields[2]
            if domain not in DOMAINS:
                raise ValueError(f"unknown domain {domain!r}")
            pair = StylePair(TokenSequence(ai), TokenSequence(hu), domain,
                             _parse_score(fields[3]), _parse_score(fields[4]))
        except ValueError as err:
            raise ValueError(f"{path}: malformed record at line {lineno}: {err}") from err
        pairs.append(pair)
    return pairs
