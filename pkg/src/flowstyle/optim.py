"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamWState:
    """First/second moments and step counter for one named parameter set."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay Adam update; parameters mutated in place.

    Missing gradients are treated as zero (the weight-decay shrink still
    applies), so frozen-at-this-step parameters keep their moments intact.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        if g is not None:
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        else:
            m *= b1
            v *= b2
        if state.weight_decay:
            p.data -= np.float32(lr * state.weight_decay) * p.data
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= np.float32(lr) * update.astype(np.float32)


class AdamW:
    """Optimizer bound to a fixed named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.state = AdamWState(self.params, beta1, beta2, eps, weight_decay)

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.params, self.state, self.lr if lr is None else lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.vdot(p.grad, p.grad))
    return math.sqrt(total)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        factor = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm
