import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsxplain.errors import ShapeError, SingularSystemError
from tsxplain.numerics import (
    RngStream,
    finite_diff_grad,
    hadamard,
    matmul,
    sigmoid,
    softmax_axis,
    weighted_least_squares,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(out, np.array([[3.0], [7.0]]))

    def test_vs_triple_loop_oracle(self):
        gen = RngStream(1).generator()
        a = gen.normal(size=(5, 4))
        b = gen.normal(size=(4, 3))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        gen = RngStream(2).generator()
        for _ in range(10):
            a = gen.normal(size=(3, 4))
            b = gen.normal(size=(4, 5))
            c = gen.normal(size=(5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.abs(left - right).max() / max(np.abs(left).max(), 1e-12) < 1e-9


class TestHadamard:
    def test_ones_identity(self):
        m = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(hadamard(m, np.ones((2, 3))), m)

    def test_zeros_absorbing(self):
        m = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(hadamard(m, np.zeros((2, 3))), np.zeros((2, 3)))

    def test_hand(self):
        out = hadamard(
            np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])
        )
        assert np.array_equal(out, np.array([[0.0, 2.0], [3.0, 0.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard(np.ones((2, 2)), np.ones((2, 3)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_commutativity(self, seed):
        gen = RngStream(seed).generator()
        a = gen.normal(size=(3, 4))
        b = gen.normal(size=(3, 4))
        assert np.array_equal(hadamard(a, b), hadamard(b, a))


class TestSoftmax:
    def test_all_equal_column_uniform(self):
        m = np.full((4, 2), 3.7)
        out = softmax_axis(m, axis="cols")
        assert np.abs(out - 0.25).max() < 1e-12

    def test_closed_form(self):
        m = np.array([[np.log(1.0)], [np.log(3.0)]])
        out = softmax_axis(m, axis="cols")
        assert np.abs(out - np.array([[0.25], [0.75]])).max() < 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_columns_sum_to_one(self, seed):
        gen = RngStream(seed).generator()
        m = gen.normal(scale=5.0, size=(5, 3))
        out = softmax_axis(m, axis="cols")
        assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-12
        assert (out >= 0).all()

    def test_shift_invariance(self):
        gen = RngStream(9).generator()
        m = gen.normal(size=(4, 3))
        shifted = m + 123.456
        a = softmax_axis(m, axis="cols")
        b = softmax_axis(shifted, axis="cols")
        assert np.abs(a - b).max() < 1e-9

    def test_rows_axis(self):
        gen = RngStream(10).generator()
        m = gen.normal(size=(3, 5))
        out = softmax_axis(m, axis="rows")
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12

    def test_no_overflow(self):
        out = softmax_axis(np.array([[1000.0, -1000.0]]).T, axis="cols")
        assert np.all(np.isfinite(out))


class TestWeightedLeastSquares:
    def test_exact_2x2(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        y = np.array([5.0, 10.0])
        expected = np.linalg.solve(A, y)
        got = weighted_least_squares(A, y, np.ones(2), ridge=0.0)
        assert np.abs(got - expected).max() < 1e-10

    def test_weight_semantics(self):
        # duplicate rows weighted {2, 0} behave like a single row of weight 2
        row = np.array([1.0, 2.0])
        design_a = np.array([row, [3.0, -1.0], row])
        targets_a = np.array([4.0, 1.0, 99.0])
        weights_a = np.array([2.0, 1.0, 0.0])
        design_b = np.array([row, [3.0, -1.0]])
        targets_b = np.array([4.0, 1.0])
        weights_b = np.array([2.0, 1.0])
        a = weighted_least_squares(design_a, targets_a, weights_a, ridge=0.0)
        b = weighted_least_squares(design_b, targets_b, weights_b, ridge=0.0)
        assert np.abs(a - b).max() < 1e-10

    def test_huge_ridge_shrinks_to_zero(self):
        gen = RngStream(3).generator()
        X = gen.normal(size=(10, 3))
        y = gen.normal(size=10)
        coeffs = weighted_least_squares(X, y, np.ones(10), ridge=1e9)
        assert np.abs(coeffs).max() < 1e-6

    def test_unpenalized_intercept(self):
        X = np.column_stack([np.ones(20), np.linspace(-1, 1, 20)])
        y = 5.0 + 0.0 * X[:, 1]
        coeffs = weighted_least_squares(X, y, np.ones(20), ridge=1e9, intercept=True)
        assert abs(coeffs[0] - 5.0) < 1e-6
        assert abs(coeffs[1]) < 1e-6

    def test_singular_without_ridge(self):
        X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(SingularSystemError, match="ridge"):
            weighted_least_squares(X, np.ones(3), np.ones(3), ridge=0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_finite_with_positive_ridge(self, seed):
        gen = RngStream(seed).generator()
        X = gen.normal(size=(6, 6))
        X[:, 3] = X[:, 2]  # force rank deficiency
        coeffs = weighted_least_squares(
            X, gen.normal(size=6), gen.random(6), ridge=1e-6
        )
        assert np.all(np.isfinite(coeffs))


class TestFiniteDiff:
    def test_square(self):
        g = finite_diff_grad(lambda p: p[0] ** 2, np.array([3.0]), 1e-5)
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant(self):
        g = finite_diff_grad(lambda p: 42.0, np.array([1.0, 2.0]), 1e-5)
        assert np.array_equal(g, np.zeros(2))

    def test_sigmoid_derivative_at_zero(self):
        g = finite_diff_grad(lambda p: float(sigmoid(p)[0]), np.array([0.0]), 1e-5)
        assert abs(g[0] - 0.25) < 1e-6

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda p: 0.0, np.array([0.0]), 0.0)


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = RngStream(42).generator().random(10)
        b = RngStream(42).generator().random(10)
        assert np.array_equal(a, b)

    def test_children_are_independent_streams(self):
        root = RngStream(7)
        a = root.child(0).generator().random(5)
        b = root.child(1).generator().random(5)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, root.child(0).generator().random(5))

    def test_parent_unchanged_by_children(self):
        root = RngStream(7)
        before = root.generator().random(3)
        root.child(99)
        assert np.array_equal(before, root.generator().random(3))
