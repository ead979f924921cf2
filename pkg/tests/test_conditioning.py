"""Frozen encoder contract, condition bundles, adapter transparency and gating."""

import numpy as np
import pytest

from flowstyle import tensor as T
from flowstyle.backbone import DiTConfig
from flowstyle.conditioning import (ConditionBundle, CrossAttnAdapter, SemanticEncoder,
                                    TinyLM, TinyLMConfig, build_condition, train_lm)
from flowstyle.layers import Linear
from flowstyle.model import StyleTransferModel
from flowstyle.rng import stream
from helpers import gradcheck

LM_CFG = TinyLMConfig(width=16, n_layers=3, heads=2, s_max=16, vocab_size=24)


@pytest.fixture
def frozen_lm():
    lm = TinyLM(LM_CFG, stream(0, "lm-fixture"))
    lm.freeze()
    return lm


def test_encoder_requires_frozen_lm():
    lm = TinyLM(LM_CFG, stream(0, "unfrozen"))
    enc = SemanticEncoder(lm, split_layer=1)
    with pytest.raises(RuntimeError, match="frozen"):
        enc.encode(np.array([[1, 2, 3]]), np.ones((1, 3), dtype=np.float32))


def test_encoder_deterministic(frozen_lm):
    enc = SemanticEncoder(frozen_lm, split_layer=2)
    ids = np.array([[3, 5, 7, 2]])
    mask = np.ones((1, 4), dtype=np.float32)
    np.testing.assert_array_equal(enc.encode(ids, mask), enc.encode(ids, mask))


def test_split_layers_differ(frozen_lm):
    ids = np.array([[3, 5, 7, 2]])
    mask = np.ones((1, 4), dtype=np.float32)
    h1 = SemanticEncoder(frozen_lm, 1).encode(ids, mask)
    h2 = SemanticEncoder(frozen_lm, 2).encode(ids, mask)
    assert np.abs(h1 - h2).max() > 1e-5


def test_split_layer_bounds(frozen_lm):
    with pytest.raises(ValueError, match="split layer"):
        SemanticEncoder(frozen_lm, 0)
    with pytest.raises(ValueError, match="split layer"):
        SemanticEncoder(frozen_lm, LM_CFG.n_layers)


def test_frozen_params_receive_no_gradient(frozen_lm):
    enc = SemanticEncoder(frozen_lm, 1)
    proj = Linear(LM_CFG.width, 8, stream(1, "proj"))
    ids = np.array([[1, 2, 3]])
    mask = np.ones((1, 3), dtype=np.float32)
    with T.Tape() as tape:
        hidden = enc.encode(ids, mask)
        bundle = build_condition(proj, hidden, mask)
        loss = T.tsum(T.square(bundle.projected))
        tape.backward(loss)
    assert proj.w.grad is not None
    assert all(p.grad is None for p in frozen_lm.named_params().values())


def test_bundle_shapes(frozen_lm):
    enc = SemanticEncoder(frozen_lm, 1)
    proj = Linear(LM_CFG.width, 8, stream(1, "proj2"))
    ids = np.array([[1, 2, 3, 0], [4, 5, 0, 0]])
    mask = (ids != 0).astype(np.float32)
    bundle = build_condition(proj, enc.encode(ids, mask), mask)
    assert bundle.projected.shape == (2, 4, 8)
    assert bundle.kv_bias.shape == (2, 1, 1, 4)
    np.testing.assert_array_equal(bundle.lengths, [3, 2])


def test_bundle_zero_hidden_gives_zero_kv():
    adapter = CrossAttnAdapter(8, 2, stream(2, "ad"))
    kv = adapter.w_kv(T.Tensor(np.zeros((1, 3, 8), dtype=np.float32)))
    np.testing.assert_array_equal(kv.data, 0.0)   # no bias on the KV map


def test_projection_gradcheck():
    proj = Linear(6, 4, stream(3, "pg"))

    def op(t):
        return T.matmul(t, proj.w)

    assert gradcheck(op, stream(4, "pgx").normal(size=(2, 5, 6)).astype(np.float32)) <= 1e-3


# ---------------------------------------------------------------------------
# adapter behavior
# ---------------------------------------------------------------------------

def _bundle_for(adapter_dim, s_q=3, batch=1, seed=7):
    rng = stream(seed, "bundle")
    projected = T.Tensor(rng.normal(size=(batch, s_q, adapter_dim)).astype(np.float32))
    return ConditionBundle(projected, np.zeros((batch, 1, 1, s_q), dtype=np.float32),
                           np.full(batch, s_q))


def test_adapter_transparent_at_init():
    adapter = CrossAttnAdapter(8, 2, stream(5, "init"))
    x = T.Tensor(stream(6, "x").normal(size=(1, 4, 8)).astype(np.float32))
    c = T.Tensor(stream(7, "c").normal(size=(1, 8)).astype(np.float32))
    out = adapter(x, _bundle_for(8), c)
    assert np.array_equal(out.data, x.data)


def test_adapter_opens_with_gate_bias():
    adapter = CrossAttnAdapter(8, 2, stream(5, "open"))
    adapter.gate.b.data = np.full(8, 0.5, dtype=np.float32)
    x = T.Tensor(stream(6, "x2").normal(size=(1, 4, 8)).astype(np.float32))
    c = T.Tensor(stream(7, "c2").normal(size=(1, 8)).astype(np.float32))
    out = adapter(x, _bundle_for(8), c)
    assert np.abs(out.data - x.data).max() > 1e-4


def test_adapter_single_kv_row_returns_value():
    """With one key, attention weights are 1: the attended output is V."""
    adapter = CrossAttnAdapter(8, 2, stream(5, "single"))
    adapter.gate.b.data = np.ones(8, dtype=np.float32)   # fully open gate
    bundle = _bundle_for(8, s_q=1)
    x = T.Tensor(stream(6, "x3").normal(size=(1, 4, 8)).astype(np.float32))
    c = T.Tensor(np.zeros((1, 8), dtype=np.float32))
    out = adapter(x, bundle, c)
    kv = adapter.w_kv(bundle.projected)
    v = kv.data[..., 8:]                                  # [1, 1, 8]
    expected = x.data + np.broadcast_to(v, (1, 4, 8))
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_adapter_width_mismatch():
    adapter = CrossAttnAdapter(8, 2, stream(5, "w"))
    x = T.Tensor(np.zeros((1, 4, 8), dtype=np.float32))
    c = T.Tensor(np.zeros((1, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="width"):
        adapter(x, _bundle_for(6), c)


def test_adapter_parameter_budget():
    d = 64
    adapter = CrossAttnAdapter(d, 4, stream(8, "count"))
    count = adapter.param_count()
    assert abs(count - 4 * d * d) <= d   # 4 d^2 plus the gate bias


def test_adapter_handles_mismatched_lengths():
    adapter = CrossAttnAdapter(8, 2, stream(5, "len"))
    adapter.gate.b.data = np.ones(8, dtype=np.float32)
    for s_q in (1, 2, 7):
        x = T.Tensor(stream(6, "x4").normal(size=(2, 5, 8)).astype(np.float32))
        c = T.Tensor(np.zeros((2, 8), dtype=np.float32))
        out = adapter(x, _bundle_for(8, s_q=s_q, batch=2), c)
        assert out.shape == (2, 5, 8)


# ---------------------------------------------------------------------------
# TinyLM training + PPL anchor
# ---------------------------------------------------------------------------

def test_untrained_lm_is_uniform():
    lm = TinyLM(LM_CFG, stream(0, "uniform"))
    ids = np.array([[1, 2, 3, 4]])
    mask = np.ones((1, 4), dtype=np.float32)
    with T.no_grad():
        logits = lm.logits(ids, mask)
    np.testing.assert_array_equal(logits.data, np.zeros_like(logits.data))


def test_train_lm_reduces_nll():
    rng = stream(11, "seqs")
    # learnable structure: token i followed by (i+1) mod range
    seqs = []
    for _ in range(50):
        start = int(rng.integers(1, 12))
        seqs.append(np.array([(start + k) % 12 + 1 for k in range(8)]))
    lm = train_lm(LM_CFG, seqs, steps=120, batch_size=16, seed=0)
    from flowstyle.embedding import pad_batch
    ids, mask = pad_batch(seqs[:16])
    with T.no_grad():
        final = lm.nll(ids, mask).item()
    assert final < np.log(LM_CFG.vocab_size) * 0.7


def test_model_condition_roundtrip_shapes():
    cfg = DiTConfig(n_blocks=1, dim=8, heads=2, s_max=8, vocab_size=12, n_freq=8, cond_width=16)
    model = StyleTransferModel(cfg, seed=0)
    hidden = stream(12, "h").normal(size=(2, 5, 16)).astype(np.float32)
    bundle = model.condition_from_hidden(hidden)
    out = model.forward(T.Tensor(stream(13, "z").normal(size=(2, 4, 8)).astype(np.float32)),
                        0.5, bundle)
    assert out.shape == (2, 4, 12)
