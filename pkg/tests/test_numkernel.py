import numpy as np
import pytest

from adfair import numkernel as nk
from conftest import central_diff, rel_err


def _check_unary(op, x, rng, tol=1e-6):
    res = op(x)
    w = rng.standard_normal(res.output.shape)
    analytic = res.backward(w)[0]
    numeric = central_diff(lambda: float(np.sum(w * op(x).output)), x)
    assert rel_err(analytic, numeric) < tol


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(nk.matmul(np.eye(2), m).output, m)

    def test_hand_example(self):
        out = nk.matmul([[1, 2], [3, 4]], [[1], [1]]).output
        np.testing.assert_array_equal(out, [[3], [7]])

    def test_zero_grad(self, rng):
        res = nk.matmul(rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))
        da, db = res.backward(np.zeros((3, 2)))
        assert not da.any() and not db.any()

    def test_shape_error_names_shapes(self):
        with pytest.raises(nk.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nk.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradients(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        w = rng.standard_normal((3, 5))
        da, db = nk.matmul(a, b).backward(w)
        f = lambda: float(np.sum(w * (a @ b)))
        assert rel_err(da, central_diff(f, a)) < 1e-6
        assert rel_err(db, central_diff(f, b)) < 1e-6


class TestAffine:
    def test_zero_input_gives_bias(self):
        out = nk.affine(np.zeros((4, 3)), np.ones((3, 2)), [[5.0, -1.0]]).output
        np.testing.assert_array_equal(out, np.tile([5.0, -1.0], (4, 1)))

    def test_identity(self, rng):
        x = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(nk.affine(x, np.eye(3), np.zeros((1, 3))).output, x)

    def test_gradients(self, rng):
        x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((1, 2))
        w = rng.standard_normal((3, 2))
        dx, dW, db = nk.affine(x, W, b).backward(w)
        f = lambda: float(np.sum(w * nk.affine(x, W, b).output))
        for analytic, arr in ((dx, x), (dW, W), (db, b)):
            assert rel_err(analytic, central_diff(f, arr)) < 1e-6

    def test_bias_shape_error(self):
        with pytest.raises(nk.DimensionError):
            nk.affine(np.ones((2, 3)), np.ones((3, 2)), np.ones((1, 3)))


class TestNonlinearity:
    def test_relu_values(self):
        np.testing.assert_array_equal(nk.nonlinearity([[-1.0, 2.0]], "relu").output, [[0.0, 2.0]])

    def test_tanh_at_zero(self):
        res = nk.nonlinearity([[0.0]], "tanh")
        assert res.output[0, 0] == 0.0
        assert res.backward(np.ones((1, 1)))[0][0, 0] == 1.0

    @pytest.mark.parametrize("kind", ["relu", "tanh"])
    def test_gradients(self, rng, kind):
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
        _check_unary(lambda t: nk.nonlinearity(t, kind), x, rng)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nk.nonlinearity([[1.0]], "gelu")


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(nk.l2_normalize_rows([[3.0, 4.0]]).output, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        row = np.array([[0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(nk.l2_normalize_rows(row).output, row)

    def test_random_rows(self, rng):
        x = rng.standard_normal((6, 4))
        out = nk.l2_normalize_rows(x).output
        assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1) < 1e-12)
        _check_unary(nk.l2_normalize_rows, x, rng)

    def test_degenerate_row_errors(self):
        with pytest.raises(nk.DegenerateRowError, match=r"\[1\]"):
            nk.l2_normalize_rows([[1.0, 0.0], [0.0, 0.0]])


class TestMaskedMeanPool:
    def test_single_token(self):
        np.testing.assert_array_equal(nk.masked_mean_pool([[2.0, 3.0]], [1]).output, [[2.0, 3.0]])

    def test_two_tokens(self):
        np.testing.assert_array_equal(
            nk.masked_mean_pool([[1.0, 1.0], [3.0, 3.0]], [1, 1]).output, [[2.0, 2.0]]
        )

    def test_masked_token_gets_no_gradient(self):
        res = nk.masked_mean_pool([[5.0, 5.0], [9.0, 9.0]], [1, 0])
        np.testing.assert_array_equal(res.output, [[5.0, 5.0]])
        (g,) = res.backward(np.array([[1.0, -2.0]]))
        np.testing.assert_array_equal(g[1], [0.0, 0.0])
        np.testing.assert_array_equal(g[0], [1.0, -2.0])

    def test_empty_mask(self):
        with pytest.raises(nk.EmptyPoolError):
            nk.masked_mean_pool([[1.0]], [0])

    def test_batch_matches_single(self, rng):
        tokens = rng.standard_normal((3, 4, 2))
        masks = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=float)
        batch = nk.masked_mean_pool_batch(tokens.reshape(12, 2), masks).output
        for i in range(3):
            np.testing.assert_allclose(batch[i], nk.masked_mean_pool(tokens[i], masks[i]).output[0])

    def test_batch_gradient(self, rng):
        tokens = rng.standard_normal((8, 3))
        masks = np.array([[1, 0, 1, 0], [0, 1, 1, 1]], dtype=float)
        _check_unary(lambda t: nk.masked_mean_pool_batch(t, masks), tokens, rng)

    def test_batch_empty_sample_index(self):
        with pytest.raises(nk.EmptyPoolError, match=r"\[1\]"):
            nk.masked_mean_pool_batch(np.ones((4, 1)), [[1, 0], [0, 0]])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nk.softmax_rows(np.full((1, 4), 7.0)).output, 0.25)

    def test_no_overflow(self):
        out = nk.softmax_rows([[1000.0, 0.0]]).output
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_rows_sum_to_one_and_gradient(self, rng):
        x = 3 * rng.standard_normal((5, 4))
        assert np.all(np.abs(nk.softmax_rows(x).output.sum(axis=1) - 1) < 1e-12)
        _check_unary(nk.softmax_rows, x, rng)

    def test_log_softmax_gradient(self, rng):
        _check_unary(nk.log_softmax_rows, rng.standard_normal((3, 5)), rng)


def test_primitives_are_pure(rng):
    x = rng.standard_normal((4, 3))
    for op in (nk.l2_normalize_rows, nk.softmax_rows, lambda t: nk.nonlinearity(t, "tanh")):
        a, b = op(x.copy()).output, op(x.copy()).output
        assert a.tobytes() == b.tobytes()


def test_random_shape_sweep(rng):
    """Every primitive against finite differences on 100 random shapes."""
    for _ in range(100):
        n, d = rng.integers(1, 6, size=2)
        x = rng.standard_normal((n, d)) + 0.1
        x[np.abs(x) < 1e-3] = 0.3
        op = rng.integers(0, 5)
        if op == 0:
            _check_unary(lambda t: nk.nonlinearity(t, "relu"), x, rng, 1e-4)
        elif op == 1:
            _check_unary(lambda t: nk.nonlinearity(t, "tanh"), x, rng, 1e-4)
        elif op == 2:
            _check_unary(nk.l2_normalize_rows, x, rng, 1e-4)
        elif op == 3:
            _check_unary(nk.softmax_rows, x, rng, 1e-4)
        else:
            W = rng.standard_normal((d, 3))
            _check_unary(lambda t: nk.matmul(t, W), x, rng, 1e-4)
