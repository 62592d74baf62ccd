import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from utils.errors import InvalidTensor, ShapeMismatch
from utils.linalg import (
    EPS,
    ascending_ranks,
    ascending_rank_normalize,
    column_cosine_similarity,
    column_norms,
    min_max_normalize,
    normalize_columns,
    softmax_over_models,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False, width=32)
matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda shape: arrays(np.float32, shape, elements=finite)
)
vectors = st.integers(1, 30).flatmap(lambda k: arrays(np.float64, (k,), elements=finite))


class TestColumnNorms:
    def test_three_four_five(self):
        W = np.array([[3.0, 0.0], [4.0, 0.0]])
        np.testing.assert_array_equal(column_norms(W, 2), [5.0, 0.0])
        np.testing.assert_array_equal(column_norms(W, 1), [7.0, 0.0])

    def test_identity(self):
        np.testing.assert_array_equal(column_norms(np.eye(2), 2), [1.0, 1.0])

    def test_matches_loop(self, rng):
        W = rng.normal(size=(4, 3))
        expected = [math.sqrt(sum(W[i, j] ** 2 for i in range(4))) for j in range(3)]
        np.testing.assert_allclose(column_norms(W), expected, rtol=0, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidTensor):
            column_norms(np.array([[1.0, np.nan]]))


class TestNormalizeColumns:
    def test_three_four_five(self):
        m, D = normalize_columns(np.array([[3.0, 0.0], [4.0, 0.0]]))
        np.testing.assert_allclose(m, [5.0, 0.0])
        np.testing.assert_allclose(D, [[0.6, 0.0], [0.8, 0.0]])

    def test_identity(self):
        m, D = normalize_columns(np.eye(2))
        np.testing.assert_array_equal(m, [1.0, 1.0])
        np.testing.assert_array_equal(D, np.eye(2))

    def test_reconstruction_many_random(self, rng):
        for _ in range(1000):
            d, k = rng.integers(1, 9, size=2)
            W = rng.normal(size=(d, k)).astype(np.float32)
            m, D = normalize_columns(W)
            assert np.max(np.abs(m * D - W)) <= 1e-6
            live = m > EPS
            np.testing.assert_allclose(np.linalg.norm(D[:, live], axis=0), 1.0, atol=1e-6)

    @given(matrices, st.sampled_from([1, 2]))
    @settings(max_examples=200, deadline=None)
    def test_reconstruction_property(self, W, c):
        m, D = normalize_columns(W, c)
        assert np.all(m >= 0)
        assert np.max(np.abs(m * D - W), initial=0.0) <= 1e-6 * max(1.0, float(np.abs(W).max(initial=0.0)))
        live = m > EPS
        np.testing.assert_allclose(np.linalg.norm(D[:, live], ord=c, axis=0), 1.0, atol=1e-6)


class TestCosine:
    def test_identical_columns(self, rng):
        A = rng.normal(size=(3, 4))
        np.testing.assert_allclose(column_cosine_similarity(A, A), 1.0)

    def test_antipodal_and_orthogonal(self):
        A = np.array([[1.0, 1.0], [0.0, 0.0]])
        B = np.array([[-1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(column_cosine_similarity(A, B), [-1.0, 0.0], atol=1e-15)

    def test_zero_column_counts_as_unchanged(self):
        A = np.array([[0.0, 1.0], [0.0, 2.0]])
        B = np.array([[1.0, 1.0], [1.0, 2.0]])
        assert column_cosine_similarity(A, B)[0] == 1.0

    def test_symmetric_and_scale_invariant(self, rng):
        A = rng.normal(size=(5, 4))
        B = rng.normal(size=(5, 4))
        ab = column_cosine_similarity(A, B)
        np.testing.assert_allclose(ab, column_cosine_similarity(B, A), atol=1e-12)
        np.testing.assert_allclose(ab, column_cosine_similarity(3.5 * A, 0.25 * B), atol=1e-12)
        assert np.all((ab >= -1.0) & (ab <= 1.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            column_cosine_similarity(np.ones((2, 2)), np.ones((2, 3)))


class TestRankNormalize:
    @pytest.mark.parametrize("values, expected", [
        ([0.3, 0.1, 0.2], [1.0, 1 / 3, 2 / 3]),
        ([5.0, 7.0], [0.5, 1.0]),
        ([0.0, 0.0, 0.0], [1 / 3, 2 / 3, 1.0]),
    ])
    def test_examples(self, values, expected):
        np.testing.assert_allclose(ascending_rank_normalize(np.array(values)), expected)

    @given(vectors)
    @settings(max_examples=200, deadline=None)
    def test_is_permutation_of_j_over_k(self, v):
        k = v.size
        out = ascending_rank_normalize(v)
        np.testing.assert_array_equal(np.sort(np.rint(out * k)), np.arange(1, k + 1))
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(out[order]) > 0)

    def test_rows_ranked_independently(self):
        table = np.array([[3.0, 1.0, 2.0], [1.0, 2.0, 3.0]])
        np.testing.assert_allclose(ascending_rank_normalize(table), [[1.0, 1 / 3, 2 / 3], [1 / 3, 2 / 3, 1.0]])

    def test_integer_ranks_follow_stable_order(self):
        ranks = ascending_ranks(np.array([[0.2, 0.2, 0.1], [3.0, 1.0, 2.0]]))
        assert ranks.dtype == np.int64
        np.testing.assert_array_equal(ranks, [[2, 3, 1], [3, 1, 2]])


class TestMinMax:
    @pytest.mark.parametrize("values, expected", [
        ([1.0, 3.0, 2.0], [0.0, 1.0, 0.5]),
        ([4.0, 4.0], [0.5, 0.5]),
        ([-1.0, 1.0], [0.0, 1.0]),
    ])
    def test_examples(self, values, expected):
        np.testing.assert_allclose(min_max_normalize(np.array(values)), expected)


class TestSoftmax:
    def test_symmetric_column(self):
        np.testing.assert_allclose(softmax_over_models(np.array([[2.0], [2.0]])), [[0.5], [0.5]])

    def test_hand_evaluated(self):
        out = softmax_over_models(np.array([[0.0], [1.0]]))
        np.testing.assert_allclose(out[:, 0], [1 / (1 + math.e), math.e / (1 + math.e)], atol=1e-12)
        np.testing.assert_allclose(out[:, 0], [0.26894, 0.73106], atol=1e-5)

    def test_single_model(self, rng):
        np.testing.assert_array_equal(softmax_over_models(rng.normal(size=(1, 5))), np.ones((1, 5)))

    @given(st.integers(1, 4).flatmap(lambda n: arrays(np.float64, (n, 5), elements=finite)))
    @settings(max_examples=200, deadline=None)
    def test_columns_sum_to_one_and_shift_invariant(self, S):
        out = softmax_over_models(S)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax_over_models(S + 7.0), out, atol=1e-9)
