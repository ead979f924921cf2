"""Noise schedule identities, the skip coefficient's closed form, Gumbel
proposal statistics, grid construction, corruption linearity."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstyle import schedule as S
from flowstyle import tensor as T
from flowstyle.rng import stream


def test_alpha_sigma_midpoint():
    assert S.alpha(0.0) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert S.sigma(0.0) == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_alpha_sigma_limits():
    assert S.alpha(20.0) == pytest.approx(0.0, abs=1e-4)
    assert S.sigma(20.0) == pytest.approx(1.0, abs=1e-8)


def test_pythagorean_identity_on_grid():
    grid = np.linspace(-10.0, 10.0, 1001)
    dev = max(abs(S.alpha(g) ** 2 + S.sigma(g) ** 2 - 1.0) for g in grid)
    assert dev < 1e-12


@given(st.floats(-30, 30))
@settings(max_examples=200, deadline=None)
def test_pythagorean_identity_anywhere(g):
    assert abs(S.alpha(g) ** 2 + S.sigma(g) ** 2 - 1.0) < 1e-12


def test_alpha_monotone_decreasing_sigma_increasing():
    grid = np.linspace(-10.0, 10.0, 500)
    alphas = [S.alpha(g) for g in grid]
    sigmas = [S.sigma(g) for g in grid]
    assert all(a > b for a, b in zip(alphas, alphas[1:]))
    assert all(a < b for a, b in zip(sigmas, sigmas[1:]))


def test_skip_coeff_at_zero_is_sqrt2():
    assert S.skip_coeff(0.0) == pytest.approx(math.sqrt(2.0), abs=1e-9)


def test_skip_coeff_at_ten():
    # softplus(-10) ~ 4.54e-5 is negligible: exp((4.54e-5 - 10)/2) ~ exp(-5)
    expected = math.exp((math.log1p(math.exp(-10.0)) - 10.0) / 2.0)
    assert S.skip_coeff(10.0) == pytest.approx(expected, rel=1e-12)
    assert S.skip_coeff(10.0) == pytest.approx(math.exp(-5.0), rel=1e-4)


def test_skip_coeff_deep_negative_asymptote():
    # c_skip(g) / exp(-g) -> 1 as g -> -inf
    g = -20.0
    assert S.skip_coeff(g) / math.exp(-g) == pytest.approx(1.0, abs=1e-6)


def test_skip_coeff_positive_everywhere():
    for g in np.linspace(-30, 30, 301):
        assert S.skip_coeff(float(g)) > 0


# ---------------------------------------------------------------------------
# corrupt
# ---------------------------------------------------------------------------

def test_corrupt_clean_limit():
    x = T.Tensor(np.random.default_rng(0).normal(size=(4, 8)).astype(np.float32))
    zero = T.Tensor(np.zeros((4, 8), dtype=np.float32))
    out = S.corrupt(x, -20.0, zero)
    assert np.abs(out.data - x.data).max() < 1e-4


def test_corrupt_noise_limit():
    x = T.Tensor(np.random.default_rng(0).normal(size=(4, 8)).astype(np.float32))
    zero = T.Tensor(np.zeros((4, 8), dtype=np.float32))
    out = S.corrupt(x, 20.0, zero)
    assert np.abs(out.data).max() < 5e-4  # alpha(20) ~ 4.5e-5 times |x|


def test_corrupt_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        S.corrupt(T.Tensor(np.zeros((2, 3))), 0.0, T.Tensor(np.zeros((3, 2))))


def test_corrupt_monte_carlo_variance():
    rng = stream(7, "mc")
    gamma = 0.8
    eps = T.Tensor(rng.standard_normal(100_000).astype(np.float32))
    x = T.Tensor(np.zeros(100_000, dtype=np.float32))
    out = S.corrupt(x, gamma, eps).data.astype(np.float64)
    assert out.var() == pytest.approx(S.sigma(gamma) ** 2, rel=0.02)


@given(st.floats(-6, 6), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_corrupt_linear_superposition(gamma, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = (T.Tensor(rng.normal(size=6).astype(np.float32)) for _ in range(2))
    e1, e2 = (T.Tensor(rng.normal(size=6).astype(np.float32)) for _ in range(2))
    lhs = S.corrupt(T.add(x1, x2), gamma, T.add(e1, e2)).data
    rhs = (S.corrupt(x1, gamma, e1).data + S.corrupt(x2, gamma, e2).data)
    assert np.abs(lhs - rhs).max() <= 1e-6 * max(1.0, np.abs(rhs).max())


def test_corrupt_batch_matches_scalar():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.normal(size=(3, 4, 5)).astype(np.float32))
    e = T.Tensor(rng.normal(size=(3, 4, 5)).astype(np.float32))
    gammas = np.array([-1.0, 0.5, 3.0])
    batched = S.corrupt_batch(x, gammas, e).data
    for i, g in enumerate(gammas):
        single = S.corrupt(T.Tensor(x.data[i]), float(g), T.Tensor(e.data[i])).data
        np.testing.assert_allclose(batched[i], single, atol=1e-6)


# ---------------------------------------------------------------------------
# Gumbel proposal
# ---------------------------------------------------------------------------

def test_gumbel_from_uniform_at_one_over_e():
    p = S.GumbelProposal(mu=1.3, beta=0.7)
    assert p.from_uniform(1.0 / math.e) == pytest.approx(1.3, abs=1e-12)


def test_gumbel_requires_positive_scale():
    with pytest.raises(ValueError, match="positive"):
        S.GumbelProposal(mu=0.0, beta=0.0)


def test_gumbel_mean_matches_euler_mascheroni():
    p = S.GumbelProposal(mu=0.5, beta=2.0)
    draws = p.sample_n(stream(123, "gumbel-mean"), 1_000_000)
    expected = p.mu + S.EULER_MASCHERONI * p.beta
    assert draws.mean() == pytest.approx(expected, abs=0.01 * p.beta)


def test_gumbel_variance():
    p = S.GumbelProposal(mu=0.0, beta=0.5)
    draws = p.sample_n(stream(77, "gumbel-var"), 1_000_000)
    assert draws.var() == pytest.approx(math.pi ** 2 * p.beta ** 2 / 6.0, rel=0.02)


def test_gumbel_reproducible():
    p = S.GumbelProposal()
    a = [S.sample_gamma(p, stream(5, "g"))for _ in range(1)]
    b = [S.sample_gamma(p, stream(5, "g")) for _ in range(1)]
    assert a == b
    da = p.sample_n(stream(5, "g"), 100)
    db = p.sample_n(stream(5, "g"), 100)
    np.testing.assert_array_equal(da, db)


# ---------------------------------------------------------------------------
# sampler grid
# ---------------------------------------------------------------------------

def test_grid_two_points():
    grid = S.gamma_grid(1.0, 0.0, 1)
    assert grid.values == (1.0, 0.0)


def test_grid_uniform_spacing():
    grid = S.gamma_grid(7.0, -4.0, 11)
    diffs = np.diff(grid.values)
    np.testing.assert_allclose(diffs, -1.0, atol=1e-12)


@given(st.integers(1, 64), st.floats(-3, 8), st.floats(0.1, 10))
@settings(max_examples=60, deadline=None)
def test_grid_endpoints_exact(steps, gmin, span):
    gstart = gmin + span
    grid = S.gamma_grid(gstart, gmin, steps)
    assert grid.values[0] == gstart
    assert grid.values[-1] == gmin
    assert len(grid.values) == steps + 1
    assert all(a > b for a, b in zip(grid.values, grid.values[1:]))


def test_grid_rejects_inverted_endpoints():
    with pytest.raises(ValueError, match="exceed"):
        S.gamma_grid(-1.0, 2.0, 4)
    with pytest.raises(ValueError, match="step count"):
        S.gamma_grid(2.0, -1.0, 0)
