import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psm.numerics import (
    RngState,
    bernoulli,
    check_unit_rows,
    cosine_similarity,
    l2_normalize_rows,
    similarity_matrix,
    softmax,
    top_k_indices,
)


class TestNormalize:
    def test_three_four_row(self):
        out = l2_normalize_rows(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8]], rtol=0, atol=1e-15)

    def test_unit_row_unchanged(self):
        out = l2_normalize_rows(np.array([[1.0, 0.0]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0]])

    def test_zero_row_stays_zero_and_flags(self):
        out, flags = l2_normalize_rows(
            np.array([[0.0, 0.0], [3.0, 4.0]]), return_flags=True
        )
        np.testing.assert_array_equal(out[0], [0.0, 0.0])
        assert flags.tolist() == [True, False]

    @given(
        st.lists(
            st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
            min_size=1,
            max_size=8,
        )
    )
    def test_rows_unit_or_zero(self, rows):
        out = l2_normalize_rows(np.array(rows, dtype=np.float64))
        norms = np.linalg.norm(out, axis=1)
        assert np.all((np.abs(norms - 1.0) < 1e-9) | (norms == 0.0))


class TestCosine:
    def test_identical(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_dot_product_oracle(self):
        got = cosine_similarity(np.array([1.0, 0.0]), np.array([0.6, 0.8]))
        assert got == pytest.approx(0.6, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    def test_clamped(self):
        v = l2_normalize_rows(np.array([[1.0, 1e-8]]))[0]
        assert abs(cosine_similarity(v, v)) <= 1.0


class TestSimilarityMatrix:
    def test_identity_rows(self):
        eye = np.eye(2)
        np.testing.assert_array_equal(similarity_matrix(eye, eye), np.eye(2))

    def test_matches_per_pair_calls(self):
        rng = RngState(3)
        a = l2_normalize_rows(rng.normal((1, 5)))
        b = l2_normalize_rows(rng.normal((3, 5)))
        got = similarity_matrix(a, b)
        assert got.shape == (1, 3)
        for j in range(3):
            assert got[0, j] == pytest.approx(cosine_similarity(a[0], b[j]), abs=1e-12)

    def test_empty_left(self):
        b = np.eye(3)
        assert similarity_matrix(np.zeros((0, 3)), b).shape == (0, 3)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            similarity_matrix(np.eye(2), np.eye(3))


class TestSoftmax:
    def test_uniform_on_equal_scores(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25), atol=1e-15)

    def test_log3_gap(self):
        w = softmax(np.array([np.log(3.0) - 0.2, -0.2]))
        np.testing.assert_allclose(w, [0.75, 0.25], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([1.0, np.nan]))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_simplex_and_shift_invariance(self, scores):
        v = np.array(scores, dtype=np.float64)
        w = softmax(v)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w > 0)
        np.testing.assert_allclose(softmax(v + 17.25), w, atol=1e-12)

    def test_extreme_scores_stable(self):
        w = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(w).all() and w[0] == pytest.approx(1.0)


class TestTopK:
    def test_plain_order(self):
        idx = top_k_indices(np.array([0.1, 0.9, 0.5]), 2)
        assert idx.tolist() == [1, 2]

    def test_ties_prefer_lowest_index(self):
        idx = top_k_indices(np.array([0.5, 0.9, 0.9, 0.5]), 3)
        assert idx.tolist() == [1, 2, 0]

    def test_k_larger_than_input(self):
        idx = top_k_indices(np.array([0.3, 0.1]), 10)
        assert idx.tolist() == [0, 1]

    def test_k_zero(self):
        assert top_k_indices(np.array([0.3]), 0).size == 0


class TestCheckUnitRows:
    def test_accepts_unit_and_zero_rows(self):
        check_unit_rows(np.array([[1.0, 0.0], [0.0, 0.0]]), "x")

    def test_rejects_off_norm(self):
        with pytest.raises(ValueError, match="x must hold unit rows"):
            check_unit_rows(np.array([[2.0, 0.0]]), "x")


class TestRngState:
    def test_same_seed_same_stream(self):
        a = RngState(42).normal(16)
        b = RngState(42).normal(16)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(RngState(1).normal(16), RngState(2).normal(16))

    def test_split_is_deterministic(self):
        a = RngState(7).split("aug", 3, 1).uniform(8)
        b = RngState(7).split("aug", 3, 1).uniform(8)
        np.testing.assert_array_equal(a, b)

    def test_int_and_str_tags_are_distinct(self):
        r = RngState(7)
        assert not np.array_equal(r.split(1).uniform(8), r.split("1").uniform(8))

    def test_bool_tag_rejected(self):
        with pytest.raises(TypeError):
            RngState(7).split(True)

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            RngState(7).split()

    def test_substreams_are_independent_of_draw_order(self):
        root = RngState(9)
        a_first = root.split("a").uniform(4)
        root2 = RngState(9)
        _ = root2.split("b").uniform(100)
        a_second = root2.split("a").uniform(4)
        np.testing.assert_array_equal(a_first, a_second)

    def test_permutation_is_permutation(self):
        p = RngState(5).permutation(20)
        assert sorted(p.tolist()) == list(range(20))

    def test_uniform_range(self):
        u = RngState(3).uniform(1000)
        assert np.all((u >= 0.0) & (u < 1.0))

    def test_bernoulli_endpoints(self):
        r = RngState(1)
        assert bernoulli(r, 1.0) is True
        assert bernoulli(r, 0.0) is False
        with pytest.raises(ValueError):
            bernoulli(r, 1.5)

    @settings(max_examples=25)
    @given(st.integers(0, 2**62), st.lists(st.integers(0, 1000), min_size=1, max_size=4))
    def test_split_path_reproducible(self, seed, tags):
        x = RngState(seed).split(*tags).uniform(3)
        y = RngState(seed).split(*tags).uniform(3)
        np.testing.assert_array_equal(x, y)
