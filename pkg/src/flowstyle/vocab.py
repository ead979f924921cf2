"""Synthetic 512-token vocabulary: id layout, token strings, vocab file I/O.

Layout (fixed by construction, not configurable):

    0            <pad>
    1..3         reserved
    4..15        template connectors   (low-entropy "machine" style markers)
    16..95       idiom markers         (high-entropy "human" style markers)
    96..127      shared function tokens (used by both styles)
    128..511     content tokens        (the skeleton both renderings share)

Content tokens are partitioned into synonym groups of 4 consecutive ids,
which the substitution baseline swaps within.
"""

from __future__ import annotations

from pathlib import Path

VOCAB_SIZE = 512
PAD_ID = 0
RESERVED = (1, 2, 3)

AI_MARK_LO, AI_MARK_HI = 4, 16        # open/close plus 10 connectors
HUM_MARK_LO, HUM_MARK_HI = 16, 96     # 80 idiom markers
FN_LO, FN_HI = 96, 128                # 32 shared function tokens
CONTENT_LO, CONTENT_HI = 128, 512     # 384 content tokens

SYNONYM_GROUP_SIZE = 4

AI_OPEN = AI_MARK_LO
AI_CLOSE = AI_MARK_LO + 1
AI_CONN_LO = AI_MARK_LO + 2           # 10 connector ids


def is_content(tok: int) -> bool:
    return CONTENT_LO <= tok < CONTENT_HI


def is_ai_marker(tok: int) -> bool:
    return AI_MARK_LO <= tok < AI_MARK_HI


def is_human_marker(tok: int) -> bool:
    return HUM_MARK_LO <= tok < HUM_MARK_HI


def synonym_group(tok: int) -> list[int]:
    """Group-mates of a content token (includes the token itself)."""
    if not is_content(tok):
        raise ValueError(f"token {tok} is not a content token")
    base = CONTENT_LO + ((tok - CONTENT_LO) // SYNONYM_GROUP_SIZE) * SYNONYM_GROUP_SIZE
    return list(range(base, base + SYNONYM_GROUP_SIZE))


def token_string(tok: int) -> str:
    if tok == PAD_ID:
        return "<pad>"
    if tok in RESERVED:
        return f"<res{tok}>"
    if tok == AI_OPEN:
        return "tpl_open"
    if tok == AI_CLOSE:
        return "tpl_close"
    if is_ai_marker(tok):
        return f"tpl_conn{tok - AI_CONN_LO}"
    if is_human_marker(tok):
        return f"idiom{tok - HUM_MARK_LO:02d}"
    if FN_LO <= tok < FN_HI:
        return f"fn{tok - FN_LO:02d}"
    return f"w{tok - CONTENT_LO:03d}"


def all_token_strings() -> list[str]:
    return [token_string(t) for t in range(VOCAB_SIZE)]


def save_vocab(path: str | Path) -> None:
    """One token string per line, line index = token id."""
    Path(path).write_text("\n".join(all_token_strings()) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) != VOCAB_SIZE:
        raise ValueError(f"vocabulary file has {len(lines)} lines, expected {VOCAB_SIZE}")
    return lines
