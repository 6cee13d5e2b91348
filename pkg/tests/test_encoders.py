from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from probprompt.encoders import (
    Vocabulary,
    build_visual_tokens,
    load_embedding_file,
    save_embedding_file,
    toy_encode_tokens,
)
from probprompt.errors import DimensionError, EmptyInputError, NonFiniteError, ParseError, VocabularyError
from probprompt.numerics import make_generator


def test_vocabulary_rows_unit_norm_and_contiguous_ids():
    vocab = Vocabulary(["car", "pedestrian", "cyclist", "a", "photo"], 16, seed=3)
    assert sorted(vocab.ids.values()) == list(range(5))
    assert torch.allclose(vocab.table.norm(dim=1), torch.ones(5), atol=1e-12)
    with pytest.raises(VocabularyError):
        vocab.id("truck")


def test_single_token_query_is_its_row():
    vocab = Vocabulary(["a", "b"], 8)
    assert torch.equal(toy_encode_tokens([1], vocab).q, vocab.table[1])


def test_opposite_tokens_cancel():
    vocab = Vocabulary(["a"], 8)
    e = vocab.table[0]
    assert torch.count_nonzero(toy_encode_tokens([e, -e], vocab).q) == 0


def test_five_token_prompt_matches_numpy_recomputation():
    vocab = Vocabulary([f"t{i}" for i in range(10)], 12, seed=5)
    cont = torch.randn(12, generator=make_generator(9))
    tokens = [3, cont, 7, 0, 3]
    got = toy_encode_tokens(tokens, vocab, source=(0, 2))
    table = vocab.table.numpy()
    expected = np.mean([table[3], cont.numpy(), table[7], table[0], table[3]], axis=0)
    assert np.abs(got.q.numpy() - expected).max() < 1e-15
    assert got.source == (0, 2)
    assert got.tokens.shape == (5, 12)


def test_encoding_errors():
    vocab = Vocabulary(["a", "b"], 4)
    with pytest.raises(EmptyInputError):
        toy_encode_tokens([], vocab)
    with pytest.raises(VocabularyError):
        toy_encode_tokens([2], vocab)
    with pytest.raises(DimensionError):
        toy_encode_tokens([torch.zeros(5)], vocab)


@settings(max_examples=30, deadline=None)
@given(ids=st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_query_is_mean_and_deterministic(ids):
    vocab = Vocabulary([str(i) for i in range(6)], 6, seed=11)
    a = toy_encode_tokens(ids, vocab)
    b = toy_encode_tokens(ids, Vocabulary([str(i) for i in range(6)], 6, seed=11))
    assert torch.allclose(a.q, a.tokens.mean(dim=0), atol=1e-12)
    assert [format(v, ".17g") for v in a.q.tolist()] == [format(v, ".17g") for v in b.q.tolist()]


def test_visual_tokens_zero_and_identity_projection():
    feat = torch.randn(4, generator=make_generator(1))
    ctx = torch.randn(4, generator=make_generator(2))
    zero = build_visual_tokens(feat, ctx, torch.zeros(4, 4)).tokens
    assert zero.shape == (2, 4) and torch.count_nonzero(zero) == 0
    ident = build_visual_tokens(feat, torch.zeros(4), torch.eye(4)).tokens
    assert torch.equal(ident[0], feat)
    assert torch.count_nonzero(ident[1]) == 0
    with pytest.raises(DimensionError):
        build_visual_tokens(torch.zeros(3), torch.zeros(4), torch.eye(4))


def test_visual_tokens_batch_shape():
    feats = torch.randn(5, 6)
    assert build_visual_tokens(feats, feats, torch.randn(6, 3)).tokens.shape == (5, 2, 3)


# --- embedding files -------------------------------------------------------


def test_single_row_file(tmp_path):
    p = tmp_path / "one.emb"
    p.write_text('{"dim": 4, "count": 1}\ncar_0,0,0,0,1\n')
    keys, mat = load_embedding_file(p)
    assert keys == ["car_0"]
    assert mat.tolist() == [[0.0, 0.0, 0.0, 1.0]]


def test_empty_body(tmp_path):
    p = tmp_path / "empty.emb"
    p.write_text('{"dim": 3, "count": 0}\n')
    keys, mat = load_embedding_file(p)
    assert keys == [] and mat.shape == (0, 3)


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((8, 16)) * 10.0 ** rng.integers(-8, 8, (8, 16))
    entries = [(f"k{i}", row) for i, row in enumerate(mat)]
    p = tmp_path / "rt.emb"
    save_embedding_file(p, entries)
    keys, back = load_embedding_file(p)
    assert keys == [k for k, _ in entries]
    assert np.array_equal(back, mat)
    assert [format(v, ".17g") for v in back.ravel()] == [format(v, ".17g") for v in mat.ravel()]


@pytest.mark.parametrize(
    "text, error",
    [
        ("not json\n", ParseError),
        ('{"count": 1}\nk,1\n', ParseError),
        ('{"dim": 2, "count": 1}\nk,1\n', DimensionError),
        ('{"dim": 2, "count": 1}\nk,1,nan\n', NonFiniteError),
        ('{"dim": 2, "count": 1}\nk,1,inf\n', NonFiniteError),
        ('{"dim": 2, "count": 1}\nk,1,x\n', ParseError),
        ('{"dim": 2, "count": 2}\nk,1,2\n', ParseError),
        ("", ParseError),
    ],
)
def test_malformed_files(tmp_path, text, error):
    p = tmp_path / "bad.emb"
    p.write_text(text)
    with pytest.raises(error):
        load_embedding_file(p)


def test_writer_rejects_non_finite_and_bad_keys(tmp_path):
    with pytest.raises(NonFiniteError):
        save_embedding_file(tmp_path / "x.emb", [("a", [1.0, float("nan")])])
    with pytest.raises(ParseError):
        save_embedding_file(tmp_path / "x.emb", [("a,b", [1.0])])
