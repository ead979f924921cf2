"""Vocabulary embedding normalization, skip logits, argmax decoding, vocab file."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstyle import tensor as T
from flowstyle import vocab as V
from flowstyle.embedding import TokenSequence, VocabEmbedding, decode_argmax, pad_batch
from flowstyle.rng import stream
from flowstyle.schedule import skip_coeff


@pytest.fixture
def emb():
    return VocabEmbedding(dim=16, rng=stream(0, "emb-test"), vocab_size=32)


def test_embedded_rows_have_norm_sqrt_d(emb):
    out = emb.embed(TokenSequence(np.array([1, 5, 9])))
    norms = np.linalg.norm(out.data, axis=-1)
    np.testing.assert_allclose(norms, math.sqrt(16), atol=1e-4)


def test_row_already_at_target_norm_is_fixed_point():
    emb = VocabEmbedding(dim=4, rng=stream(0, "fp"), vocab_size=8)
    emb.table.data[3] = np.array([2.0, 0.0, 0.0, 0.0], dtype=np.float32)
    out = emb.embed(TokenSequence(np.array([3])))
    np.testing.assert_allclose(out.data[0], [2.0, 0.0, 0.0, 0.0], atol=1e-5)


def test_zero_row_guard_keeps_output_finite():
    emb = VocabEmbedding(dim=4, rng=stream(0, "zero"), vocab_size=8)
    emb.table.data[2] = 0.0
    out = emb.embed(TokenSequence(np.array([2])))
    assert np.all(np.isfinite(out.data))


def test_embed_invalid_id_rejected(emb):
    with pytest.raises(IndexError, match="99"):
        emb.embed(TokenSequence(np.array([99])))


def test_normalization_is_differentiable(emb):
    emb.table.requires_grad = True
    with T.Tape() as tape:
        out = emb.embed(TokenSequence(np.array([1, 2])))
        tape.backward(T.tsum(out))
    assert emb.table.grad is not None
    assert np.abs(emb.table.grad[1]).max() > 0


def test_skip_logits_zero_latent(emb):
    z = T.Tensor(np.zeros((3, 16), dtype=np.float32))
    out = emb.skip_logits(z, 1.0)
    np.testing.assert_array_equal(out.data, np.zeros((3, 32), dtype=np.float32))


def test_skip_logits_orthogonal_table_recovers_token():
    emb = VocabEmbedding(dim=8, rng=stream(0, "orth"), vocab_size=8)
    emb.table.data = (np.eye(8) * 2.0).astype(np.float32)   # orthogonal rows
    for k in (0, 3, 7):
        z = T.Tensor(emb.table.data[k][None, :])
        logits = emb.skip_logits(z, 0.0)
        assert int(np.argmax(logits.data[0])) == k


def test_skip_logits_scales_with_coefficient(emb):
    z = T.Tensor(stream(1, "z").normal(size=(2, 16)).astype(np.float32))
    a = emb.skip_logits(z, 0.0).data
    b = emb.skip_logits(z, 2.0).data
    ratio = skip_coeff(2.0) / skip_coeff(0.0)
    np.testing.assert_allclose(b, a * ratio, rtol=1e-5)


def test_skip_logits_width_mismatch(emb):
    with pytest.raises(ValueError, match="width"):
        emb.skip_logits(T.Tensor(np.zeros((2, 7), dtype=np.float32)), 0.0)


def test_decode_argmax_one_hot():
    logits = np.zeros((3, 5), dtype=np.float32)
    logits[0, 2] = 1.0
    logits[1, 4] = 3.0
    logits[2, 0] = 0.5
    assert decode_argmax(T.Tensor(logits)).tolist() == [2, 4, 0]


def test_decode_argmax_tie_goes_to_lowest_id():
    logits = np.zeros((4, 6), dtype=np.float32)
    assert decode_argmax(T.Tensor(logits)).tolist() == [0, 0, 0, 0]


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_decode_argmax_matches_numpy(seed):
    logits = np.random.default_rng(seed).normal(size=(6, 9)).astype(np.float32)
    assert decode_argmax(logits).tolist() == list(np.argmax(logits, axis=-1))


def test_skip_roundtrip_on_orthogonalized_table():
    emb = VocabEmbedding(dim=16, rng=stream(0, "rt"), vocab_size=16)
    q, _ = np.linalg.qr(stream(3, "q").normal(size=(16, 16)))
    emb.table.data = (q * 1.7).astype(np.float32)
    ids = TokenSequence(np.array([0, 5, 11, 15]))
    z = emb.embed(ids)
    out = decode_argmax(emb.skip_logits(z, 0.5))
    assert out == ids


def test_pad_batch_shapes_and_mask():
    ids, mask = pad_batch([np.array([1, 2, 3]), np.array([4])])
    assert ids.shape == (2, 3)
    np.testing.assert_array_equal(ids[1], [4, 0, 0])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])


def test_pad_batch_rejects_overlong():
    with pytest.raises(ValueError, match="exceeds"):
        pad_batch([np.array([1, 2, 3])], length=2)


# ---------------------------------------------------------------------------
# vocabulary file round trip
# ---------------------------------------------------------------------------

def test_vocab_file_roundtrip(tmp_path):
    path = tmp_path / "vocab.txt"
    V.save_vocab(path)
    strings = V.load_vocab(path)
    assert len(strings) == V.VOCAB_SIZE
    assert strings[V.PAD_ID] == "<pad>"
    assert strings[V.AI_OPEN] == "tpl_open"
    assert strings[V.CONTENT_LO] == "w000"


def test_vocab_file_wrong_length_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("a\nb\n")
    with pytest.raises(ValueError, match="lines"):
        V.load_vocab(path)


def test_synonym_groups_partition_content():
    g = V.synonym_group(V.CONTENT_LO + 5)
    assert len(g) == V.SYNONYM_GROUP_SIZE
    assert V.CONTENT_LO + 5 in g
    assert all(V.is_content(t) for t in g)
    with pytest.raises(ValueError, match="content"):
        V.synonym_group(V.PAD_ID)
