"""Seedable RNG streams, split by purpose.

Every stochastic component draws from its own named stream so that config
changes (e.g. an ablation flag) perturb only the randomness they should.
Streams are derived from a root seed plus a label path via SeedSequence
spawn keys, so they are stable across runs and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str | int) -> int:
    if isinstance(label, int):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative ints, got {label}")
        return label
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, *labels: str | int) -> np.random.Generator:
    """Return the generator for `seed` at the given label path.

    Same (seed, labels) always yields an identical generator. Different
    label paths are statistically independent.
    """
    key = tuple(_label_key(l) for l in labels)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class StreamHub:
    """Convenience wrapper holding a root seed and handing out named streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *labels: str | int) -> np.random.Generator:
        return stream(self.seed, *labels)
