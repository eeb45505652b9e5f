import math

import numpy as np
import pytest

from speckv import numerics


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        assert np.array_equal(numerics.matmul(np.eye(2, dtype=np.float32), m), m)

    def test_hand_example(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        b = np.array([[1], [1]], dtype=np.float32)
        assert numerics.matmul(a, b).tolist() == [[3.0], [7.0]]

    def test_against_triple_loop_oracle(self, rng):
        a = rng.standard_normal((8, 8)).astype(np.float32)
        b = rng.standard_normal((8, 8)).astype(np.float32)
        assert np.abs(numerics.matmul(a, b) - naive_matmul(a, b)).max() < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            numerics.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestMaskedSoftmax:
    def test_symmetric_row(self):
        out = numerics.masked_softmax_rows(np.zeros((1, 2)), np.ones((1, 2), bool))
        assert np.allclose(out, [[0.5, 0.5]])

    def test_single_survivor(self):
        out = numerics.masked_softmax_rows(
            np.array([[3.0, 100.0]]), np.array([[True, False]]))
        assert out.tolist() == [[1.0, 0.0]]

    def test_direct_oracle(self):
        row = np.array([[1.0, 2.0, 3.0]])
        out = numerics.masked_softmax_rows(row, np.ones((1, 3), bool))
        exp = np.exp(row[0])
        assert np.abs(out[0] - exp / exp.sum()).max() < 1e-3
        assert np.allclose(out[0], [0.0900, 0.2447, 0.6652], atol=1e-3)

    def test_rows_sum_to_one(self, rng):
        scores = rng.standard_normal((20, 7)).astype(np.float32) * 30
        mask = rng.random((20, 7)) < 0.7
        mask[:, 0] = True
        out = numerics.masked_softmax_rows(scores, mask)
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-6
        assert (out[~mask] == 0.0).all()

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError):
            numerics.masked_softmax_rows(np.zeros((1, 3)), np.zeros((1, 3), bool))


class TestRmsnorm:
    def test_unit_rms(self):
        x = np.ones(8, dtype=np.float32)
        out = numerics.rmsnorm(x, x, eps=1e-12)
        assert np.abs(out - 1.0).max() < 1e-5

    def test_zero_vector(self):
        out = numerics.rmsnorm(np.zeros(4), np.ones(4), eps=1e-6)
        assert np.array_equal(out, np.zeros(4, dtype=np.float32))

    def test_scalar_loop_oracle(self, rng):
        x = rng.standard_normal(16).astype(np.float32)
        gain = rng.standard_normal(16).astype(np.float32)
        eps = 1e-5
        rms = math.sqrt(sum(float(v) ** 2 for v in x) / 16 + eps)
        expected = np.array([float(v) * float(g) / rms for v, g in zip(x, gain)])
        assert np.abs(numerics.rmsnorm(x, gain, eps) - expected).max() < 1e-6


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.standard_normal(8).astype(np.float32)
        assert np.allclose(numerics.rope_apply(x, 0), x)

    def test_norm_preserved(self, rng):
        x = rng.standard_normal(16).astype(np.float32)
        out = numerics.rope_apply(x, 37)
        assert abs(np.linalg.norm(out) - np.linalg.norm(x)) < 1e-5

    def test_two_dim_rotation_oracle(self):
        x = np.array([1.0, 0.0], dtype=np.float32)
        out = numerics.rope_apply(x, 1, base=123.0)  # exponent is 0: angle = 1 rad
        assert np.allclose(out, [math.cos(1.0), math.sin(1.0)], atol=1e-6)

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            numerics.rope_apply(np.zeros(3), 1)


class TestArgmax:
    def test_basic(self):
        assert numerics.argmax_row(np.array([0.1, 0.9])) == 1

    def test_singleton(self):
        assert numerics.argmax_row(np.array([5.0])) == 0

    def test_tie_breaks_low(self):
        assert numerics.argmax_row(np.array([2.0, 2.0, 1.0])) == 0

    def test_shift_invariant(self, rng):
        row = rng.standard_normal(12)
        assert numerics.argmax_row(row) == numerics.argmax_row(row + 5.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            numerics.argmax_row(np.array([]))
