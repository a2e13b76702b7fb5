"""Hashed n-gram featurizer: determinism, normalization, matrix parity."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srvf.features import HashedTextFeaturizer

FEAT = HashedTextFeaturizer(feature_space=2**12, ngram_range=(3, 5), hash_seed=17)

texts = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), max_codepoint=0x2FF),
    min_size=1,
    max_size=60,
).filter(lambda t: t.strip())


def test_identical_inputs_identical_outputs():
    a_idx, a_vals = FEAT.features("the quick brown fox")
    other = HashedTextFeaturizer(feature_space=2**12, ngram_range=(3, 5), hash_seed=17)
    b_idx, b_vals = other.features("the quick brown fox")
    assert np.array_equal(a_idx, b_idx)
    assert np.array_equal(a_vals, b_vals)


def test_seed_changes_buckets():
    a_idx, _ = FEAT.features("the quick brown fox")
    other = HashedTextFeaturizer(feature_space=2**12, ngram_range=(3, 5), hash_seed=18)
    b_idx, _ = other.features("the quick brown fox")
    assert not np.array_equal(a_idx, b_idx)


def test_case_insensitive():
    a = FEAT.features("Quick Brown")
    b = FEAT.features("quick brown")
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_short_text_falls_back_to_word_features():
    # two chars: below the 3-gram window, so only the word hash contributes
    idx, vals = FEAT.features("ab")
    assert len(idx) == 1
    assert vals[0] == pytest.approx(1.0)


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        FEAT.features("   ")


def test_bucket_count_oracle():
    # "abcd": 3-grams abc,bcd; 4-gram abcd; one word = 4 hashes before collisions
    idx, vals = FEAT.features("abcd")
    assert 1 <= len(idx) <= 4
    assert float(np.linalg.norm(vals)) == pytest.approx(1.0)


@given(texts)
def test_vals_are_l2_normalized(text):
    _, vals = FEAT.features(text)
    assert float(np.linalg.norm(vals)) == pytest.approx(1.0)


@given(texts)
def test_indices_sorted_unique_in_range(text):
    idx, vals = FEAT.features(text)
    assert np.all(np.diff(idx) > 0)
    assert idx.min() >= 0 and idx.max() < FEAT.feature_space
    assert len(idx) == len(vals)
    assert np.all(vals > 0)


def test_matrix_rows_match_features():
    rows = ["alpha beta gamma", "delta epsilon", "zeta eta theta iota"]
    mat = FEAT.matrix(rows)
    assert mat.shape == (3, FEAT.feature_space)
    for i, t in enumerate(rows):
        idx, vals = FEAT.features(t)
        row = mat.getrow(i)
        assert np.array_equal(row.indices, idx)
        assert np.allclose(row.data, vals)


def test_empty_matrix():
    mat = FEAT.matrix([])
    assert mat.shape == (0, FEAT.feature_space)
