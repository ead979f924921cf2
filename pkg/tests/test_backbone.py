"""Denoiser trunk: timestep embedding, modulation, attention, zero-init identity."""

import numpy as np
import pytest

from flowstyle import tensor as T
from flowstyle.backbone import DiTConfig, TimestepEmbedder, modulate
from flowstyle.layers import RoPECache, causal_bias, key_padding_bias
from flowstyle.model import StyleTransferModel
from flowstyle.rng import stream
from helpers import gradcheck

TINY = DiTConfig(n_blocks=2, dim=8, heads=2, s_max=8, vocab_size=12, n_freq=16, cond_width=6)


@pytest.fixture
def model():
    return StyleTransferModel(TINY, seed=0)


def rand(*shape, seed=0):
    return stream(seed, "bb-test").normal(size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# timestep embedding
# ---------------------------------------------------------------------------

def test_timestep_deterministic():
    emb = TimestepEmbedder(TINY, stream(0, "ts"))
    a = emb(np.array([1.3])).data
    b = emb(np.array([1.3])).data
    np.testing.assert_array_equal(a, b)


def test_timestep_continuity():
    emb = TimestepEmbedder(DiTConfig(), stream(0, "ts2"))
    a = emb(np.array([2.0])).data
    b = emb(np.array([2.0 + 1e-6])).data
    assert np.abs(a - b).max() < 1e-3


def test_timestep_distinguishes_levels():
    emb = TimestepEmbedder(TINY, stream(0, "ts3"))
    a = emb(np.array([0.0])).data
    b = emb(np.array([4.0])).data
    assert np.abs(a - b).max() > 1e-4


def test_timestep_gradcheck():
    """Gradcheck through the embedder's MLP weights (gamma itself is not a
    differentiable input; its features are constants)."""
    from flowstyle.layers import sinusoidal_features

    emb = TimestepEmbedder(TINY, stream(0, "ts4"))
    feats = T.Tensor(sinusoidal_features(np.array([0.7]), TINY.n_freq))

    def op(t):
        h = T.silu(T.add(T.matmul(feats, t), emb.fc1.b))
        return T.silu(T.add(T.matmul(h, emb.fc2.w), emb.fc2.b))

    assert gradcheck(op, emb.fc1.w.data.copy()) <= 1e-3


# ---------------------------------------------------------------------------
# modulation
# ---------------------------------------------------------------------------

def test_modulate_zero_params_is_layernorm():
    x = T.Tensor(rand(2, 3, 8))
    zero = T.Tensor(np.zeros((2, 1, 8), dtype=np.float32))
    out = modulate(x, zero, zero)
    np.testing.assert_array_equal(out.data, T.layernorm(x).data)


def test_modulate_scale_minus_one_yields_shift():
    x = T.Tensor(rand(2, 3, 8))
    shift = T.Tensor(rand(2, 1, 8, seed=5))
    scale = T.Tensor(np.full((2, 1, 8), -1.0, dtype=np.float32))
    out = modulate(x, shift, scale)
    np.testing.assert_allclose(out.data, np.broadcast_to(shift.data, (2, 3, 8)), atol=1e-6)


def test_modulate_gradcheck():
    shift = T.Tensor(rand(1, 1, 6, seed=2))
    scale = T.Tensor(rand(1, 1, 6, seed=3))
    assert gradcheck(lambda t: modulate(t, shift, scale), rand(1, 4, 6)) <= 1e-3


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_single_position_attention_is_value_projection(model):
    blk = model.blocks[0].attn
    x = T.Tensor(rand(1, 1, 8))
    rope = RoPECache(4, TINY.head_dim)
    out = blk(x, rope, None)
    # with one position the attention weight is 1; output = W_o(v)
    d = TINY.dim
    qkv = blk.qkv(x)
    v = T.slice_last(qkv, 2 * d, 3 * d)
    expected = blk.out(v)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-5)


def test_attention_rows_sum_to_one():
    scores = T.softmax(T.Tensor(rand(2, 2, 5, 5)), axis=-1)
    np.testing.assert_allclose(scores.data.sum(-1), 1.0, atol=1e-6)


def test_rope_position_sensitivity():
    """Swapping two positions merely permutes outputs without rotary phases,
    but changes them once positions are encoded."""
    from flowstyle.layers import attention

    rope = RoPECache(8, 4)
    perm = [1, 0, 2, 3]
    q = rand(1, 2, 4, 4, seed=21)
    k = rand(1, 2, 4, 4, seed=22)
    v = rand(1, 2, 4, 4, seed=23)
    qs, ks, vs = q[:, :, perm], k[:, :, perm], v[:, :, perm]

    plain = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
    plain_swapped = attention(T.Tensor(qs), T.Tensor(ks), T.Tensor(vs)).data
    np.testing.assert_allclose(plain[:, :, perm], plain_swapped, atol=2e-6)

    def with_rope(a, b, c):
        return attention(rope.apply(T.Tensor(a)), rope.apply(T.Tensor(b)), T.Tensor(c)).data

    rot = with_rope(q, k, v)
    rot_swapped = with_rope(qs, ks, vs)
    assert np.abs(rot[:, :, perm] - rot_swapped).max() > 1e-3


def test_pad_mask_blocks_information_flow(model):
    """Changing a masked position's content must not affect unmasked outputs."""
    z1 = rand(1, 4, 8)
    z2 = z1.copy()
    z2[0, 3] = 99.0
    mask = np.array([[1, 1, 1, 0]], dtype=np.float32)
    a = model.forward(T.Tensor(z1), 0.5, None, mask).data
    b = model.forward(T.Tensor(z2), 0.5, None, mask).data
    np.testing.assert_allclose(a[0, :3], b[0, :3], atol=1e-5)


def test_sequence_length_cap(model):
    z = T.Tensor(rand(1, TINY.s_max + 1, 8))
    with pytest.raises(ValueError, match="exceeds"):
        model.forward(z, 0.0)


# ---------------------------------------------------------------------------
# zero-init identity
# ---------------------------------------------------------------------------

def test_zero_init_identity_bit_exact(model):
    rng = stream(42, "id-test")
    for trial in range(20):
        b, s = int(rng.integers(1, 3)), int(rng.integers(1, TINY.s_max + 1))
        z = T.Tensor(rng.normal(size=(b, s, TINY.dim)).astype(np.float32))
        gamma = float(rng.normal() * 3)
        cond = None
        if trial % 2:
            hidden = rng.normal(size=(b, 4, TINY.cond_width)).astype(np.float32)
            cond = model.condition_from_hidden(hidden)
        logits = model.forward(z, gamma, cond)
        skip = model.embedding.skip_logits_batch(z, np.full(b, gamma))
        assert np.array_equal(logits.data, skip.data), f"trial {trial} not bit-exact"


def test_zero_init_condition_independence(model):
    rng = stream(43, "cond-test")
    z = T.Tensor(rng.normal(size=(2, 5, TINY.dim)).astype(np.float32))
    h = rng.normal(size=(2, 3, TINY.cond_width)).astype(np.float32)
    bare = model.forward(z, 1.0, None)
    cond = model.forward(z, 1.0, model.condition_from_hidden(h))
    assert np.array_equal(bare.data, cond.data)


def test_full_forward_gradcheck():
    """End-to-end gradcheck through a 2-token toy forward w.r.t. the latent."""
    m = StyleTransferModel(TINY, seed=1)
    # give the zero-init maps some signal so the whole path is exercised
    rng = stream(9, "warm")
    for blk in m.blocks:
        blk.adaln.w.data = rng.normal(0, 0.02, blk.adaln.w.data.shape).astype(np.float32)
        blk.adapter.gate.w.data = rng.normal(0, 0.02, blk.adapter.gate.w.data.shape).astype(np.float32)
    m.final.proj.w.data = rng.normal(0, 0.02, m.final.proj.w.data.shape).astype(np.float32)
    hidden = rng.normal(size=(1, 3, TINY.cond_width)).astype(np.float32)

    def fwd(t):
        bundle = m.condition_from_hidden(hidden)
        return m.forward(t, 0.8, bundle)

    assert gradcheck(fwd, rng.normal(size=(1, 2, TINY.dim)).astype(np.float32)) <= 1e-3


def test_param_groups_disjoint_and_complete(model):
    groups = model.param_groups()
    backbone, new = set(groups["backbone"]), set(groups["new"])
    assert not backbone & new
    assert set(model.named_params()) == backbone | new
    assert any("adapter" in k for k in new)
    assert any("proj" in k for k in new)
    assert all("adapter" not in k for k in backbone)


def test_forward_deterministic(model):
    z = T.Tensor(rand(2, 6, 8, seed=11))
    a = model.forward(z, 0.3).data
    b = model.forward(z, 0.3).data
    np.testing.assert_array_equal(a, b)
