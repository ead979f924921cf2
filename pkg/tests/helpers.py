"""Shared test utilities: the central finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from flowstyle import tensor as T


def fd_grad(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x, in float32.

    fn maps a float32 array to a python float and must not touch the tape.
    """
    x = np.asarray(x, dtype=np.float32)
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + np.float32(h)
        up = fn(x)
        flat[i] = orig - np.float32(h)
        dn = fn(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2.0 * h)
    return g.reshape(x.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


def gradcheck(op, x: np.ndarray, probe_seed: int = 0, h: float = 1e-3) -> float:
    """Reverse-mode vs central-difference gradient of probe-weighted output.

    `op` maps a Tensor to a Tensor; the output is scalarized against a fixed
    random probe so every output component contributes to the gradient.
    Returns the max relative error.
    """
    x = np.asarray(x, dtype=np.float32)
    probe_rng = np.random.default_rng(probe_seed)
    probe: np.ndarray | None = None

    def scalar_fn(arr: np.ndarray) -> float:
        nonlocal probe
        out = op(T.Tensor(arr))
        if probe is None:
            probe = probe_rng.normal(size=out.data.shape).astype(np.float32)
        # the op runs in float32; only the scalarization happens in float64
        return float((out.data.astype(np.float64) * probe).sum())

    baseline = scalar_fn(x)  # fixes the probe
    assert np.isfinite(baseline)

    xt = T.Tensor(x.copy(), requires_grad=True)
    with T.Tape() as tape:
        out = op(xt)
        loss = T.tsum(T.mul_const(out, probe))
        tape.backward(loss)
    ad = xt.grad.copy()
    fd = fd_grad(scalar_fn, x.copy(), h=h)
    return rel_err(ad, fd)
