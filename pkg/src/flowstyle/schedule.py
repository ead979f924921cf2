"""Noise schedule, skip coefficient, Gumbel noise-level proposal, sampler grid.

All scalar coefficient math runs in float64; values are cast to float32 only
when they multiply tensor data. The schedule is stateless:

    alpha(g) = sqrt(sigmoid(-g))        signal coefficient
    sigma(g) = sqrt(sigmoid(g))         noise coefficient
    skip_coeff(g) = exp((softplus(-g) - g) / 2)

so alpha^2 + sigma^2 == 1 identically, alpha is strictly decreasing and
sigma strictly increasing in g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

EULER_MASCHERONI = 0.5772156649015329


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    if x > 30.0:
        return x
    return math.log1p(math.exp(x)) if x < 0 else x + math.log1p(math.exp(-x))


def alpha(gamma: float) -> float:
    return math.sqrt(_sigmoid(-gamma))


def sigma(gamma: float) -> float:
    return math.sqrt(_sigmoid(gamma))


def skip_coeff(gamma: float) -> float:
    return math.exp((_softplus(-gamma) - gamma) / 2.0)


def corrupt(x: T.Tensor, gamma: float, eps: T.Tensor) -> T.Tensor:
    """alpha(gamma) * x + sigma(gamma) * eps, differentiable in x and eps."""
    if x.shape != eps.shape:
        raise ValueError(f"corrupt shape mismatch: x {x.shape} vs eps {eps.shape}")
    return T.scale(x, alpha(gamma)) + T.scale(eps, sigma(gamma))


def corrupt_batch(x: T.Tensor, gammas: np.ndarray, eps: T.Tensor) -> T.Tensor:
    """Per-sample corruption: x, eps are [B, ...]; gammas is [B]."""
    if x.shape != eps.shape:
        raise ValueError(f"corrupt shape mismatch: x {x.shape} vs eps {eps.shape}")
    g = np.asarray(gammas, dtype=np.float64)
    extra = (1,) * (x.ndim - 1)
    a = np.sqrt(1.0 / (1.0 + np.exp(g))).astype(np.float32).reshape(-1, *extra)
    s = np.sqrt(1.0 / (1.0 + np.exp(-g))).astype(np.float32).reshape(-1, *extra)
    return T.mul_const(x, a) + T.mul_const(eps, s)


@dataclass
class GumbelProposal:
    """Noise-level proposal gamma ~ Gumbel(mu, beta); fixed, not learned."""

    mu: float = 0.0
    beta: float = 2.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"Gumbel scale must be positive, got {self.beta}")

    def from_uniform(self, u: float) -> float:
        return self.mu - self.beta * math.log(-math.log(u))

    def sample(self, rng: np.random.Generator) -> float:
        u = min(max(rng.random(), 1e-12), 1.0 - 1e-12)
        return self.from_uniform(u)

    def sample_n(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
        return self.mu - self.beta * np.log(-np.log(u))


def sample_gamma(proposal: GumbelProposal, rng: np.random.Generator) -> float:
    return proposal.sample(rng)


@dataclass(frozen=True)
class SamplerGrid:
    """Strictly decreasing gamma values, gamma_start first, gamma_min last."""

    gamma_start: float
    gamma_min: float
    steps: int
    values: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.values)


def gamma_grid(gamma_start: float, gamma_min: float, steps: int) -> SamplerGrid:
    """steps+1 uniformly spaced gamma values from gamma_start down to gamma_min."""
    if steps < 1:
        raise ValueError(f"step count must be >= 1, got {steps}")
    if not gamma_start > gamma_min:
        raise ValueError(f"gamma_start ({gamma_start}) must exceed gamma_min ({gamma_min})")
    values = tuple(float(v) for v in np.linspace(gamma_start, gamma_min, steps + 1))
    return SamplerGrid(gamma_start, gamma_min, steps, values)
