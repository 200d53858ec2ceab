import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attention.dense import (
    SENTINEL,
    KeepSets,
    causal_mask,
    causal_scores,
    default_scale,
    dense_attention,
    dense_output_blocked,
    frobenius_diff,
    row_softmax_causal,
    truncated_output,
    truncation_bound,
)
from core.errors import InvalidDimensionError, SelectionError
from core.tensors import as_matrix, gen_gaussian_qkv, philox
from lab.oracles import random_keep_sets


def test_softmax_of_known_row():
    scores = np.full((3, 3), SENTINEL, dtype=np.float32)
    scores[2] = [1.0, 2.0, 3.0]
    scores[0, 0] = 0.0
    scores[1, :2] = 0.0
    p = row_softmax_causal(as_matrix(scores)).p
    np.testing.assert_allclose(p[2], [0.09003057, 0.24472847, 0.66524096], atol=1e-6)
    np.testing.assert_allclose(p[1], [0.5, 0.5, 0.0])


def naive_causal_attention(q, k, v):
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = []
        for j in range(i + 1):
            dot = 0.0
            for t in range(d):
                dot += float(q[i, t]) * float(k[j, t])
            scores.append(dot / np.sqrt(d))
        top = max(scores)
        weights = [np.exp(s - top) for s in scores]
        total = sum(weights)
        for j, w in enumerate(weights):
            out[i] += (w / total) * v[j].astype(np.float64)
    return out


@pytest.mark.parametrize("n,d", [(1, 3), (17, 4), (64, 5)])
def test_matches_naive_loops(n, d):
    q, k, v = gen_gaussian_qkv(n, d, seed=n)
    np.testing.assert_allclose(dense_attention(q, k, v).o, naive_causal_attention(q, k, v), atol=1e-6)


def test_first_row_attends_only_to_itself(small_qkv):
    result = dense_attention(*small_qkv)
    assert result.probs.p[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(result.o[0], small_qkv.v[0], rtol=1e-6)


def test_probabilities_are_causal_and_normalized(small_qkv):
    p = dense_attention(*small_qkv).probs.p.astype(np.float64)
    assert np.all(np.triu(p, k=1) == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_causal_scores_mask_with_sentinel(small_qkv):
    s = causal_scores(small_qkv.q, small_qkv.k, default_scale(8))
    assert s[0, 1] == SENTINEL
    assert np.all(np.isfinite(s))


def test_shape_mismatch_is_rejected():
    q, k, v = gen_gaussian_qkv(6, 4, seed=0)
    with pytest.raises(InvalidDimensionError):
        dense_attention(q, k[:5], v)
    with pytest.raises(InvalidDimensionError):
        dense_attention(q, as_matrix(np.ones((6, 3))), v)


def test_blocked_dense_matches_full(small_qkv):
    full = dense_attention(*small_qkv).o
    blocked = dense_output_blocked(*small_qkv, block_rows=7)
    np.testing.assert_allclose(blocked, full, atol=1e-5)


def test_keep_sets_validate_rows():
    with pytest.raises(SelectionError):
        KeepSets([[0], [2]])
    with pytest.raises(SelectionError):
        KeepSets([[0], [1, 0]])
    keep = KeepSets.from_lists([[0], [1, 0]])
    assert keep.sizes().tolist() == [1, 2]
    assert KeepSets.empty(2).is_subset_of(keep)
    assert keep.is_subset_of(KeepSets.full(2))


def test_keep_sets_from_mask():
    keep = KeepSets.from_mask(np.tril(np.ones((3, 3), dtype=bool)))
    assert [r.tolist() for r in keep.rows] == [[0], [0, 1], [0, 1, 2]]
    assert np.array_equal(keep.mask(), KeepSets.full(3).mask())
    with pytest.raises(SelectionError):
        KeepSets.from_mask(np.ones((2, 2), dtype=bool))
    with pytest.raises(InvalidDimensionError):
        KeepSets.from_mask(np.ones((2, 3), dtype=bool))


@pytest.mark.parametrize("n", [1, 7, 64, 200])
def test_full_keep_truncation_is_exact(n):
    q, k, v = gen_gaussian_qkv(n, 8, seed=n)
    dense = dense_attention(q, k, v)
    full = KeepSets.full(n)
    assert np.array_equal(truncated_output(dense.probs, v, full), dense.o)
    assert truncation_bound(dense.probs, v, full) == 0.0


def test_bound_shrinks_as_keep_sets_grow():
    for seed in range(20):
        q, k, v = gen_gaussian_qkv(16, 4, seed)
        probs = dense_attention(q, k, v).probs
        rng = philox(seed, 1)
        inner = random_keep_sets(16, rng, 0.3)
        outer = KeepSets.from_mask(inner.mask() | ((rng.random((16, 16)) < 0.4) & causal_mask(16)))
        assert inner.is_subset_of(outer)
        assert truncation_bound(probs, v, outer) <= truncation_bound(probs, v, inner) + 1e-12


def test_empty_keep_bound_is_weighted_norm_sum(small_qkv):
    dense = dense_attention(*small_qkv)
    norms = np.linalg.norm(small_qkv.v.astype(np.float64), axis=1)
    expected = float((dense.probs.p.astype(np.float64) @ norms).sum())
    assert truncation_bound(dense.probs, small_qkv.v, KeepSets.empty(40)) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 24), d=st.integers(1, 8), seed=st.integers(0, 10_000), keep_prob=st.floats(0.0, 1.0))
def test_truncation_error_never_exceeds_bound(n, d, seed, keep_prob):
    q, k, v = gen_gaussian_qkv(n, d, seed)
    dense = dense_attention(q, k, v)
    rng = np.random.default_rng(seed)
    keep = KeepSets(np.flatnonzero(rng.random(i + 1) < keep_prob) for i in range(n))
    lhs = frobenius_diff(dense.o, truncated_output(dense.probs, v, keep))
    assert lhs <= truncation_bound(dense.probs, v, keep) + 1e-5
