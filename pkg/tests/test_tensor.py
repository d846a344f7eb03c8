import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedsn.tensor import (ShapeError, as_tensor, deterministic_mode, ewise_add, ewise_max,
                            fill, make_rng, matmul, reshape, scale, zeros)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = out.dtype.type(0)
            for k in range(a.shape[1]):
                acc = acc + a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestConstruction:
    def test_zeros(self):
        assert zeros((2, 2)).tolist() == [[0, 0], [0, 0]]
        assert zeros((2, 2)).dtype == np.float32

    def test_fill(self):
        assert (fill((3,), 2.5, np.float64) == 2.5).all()

    def test_rejects_integer_dtype(self):
        with pytest.raises(TypeError):
            as_tensor([1, 2], dtype=np.int32)


class TestReshape:
    def test_row_major(self):
        t = as_tensor([[1, 2, 3], [4, 5, 6]])
        assert reshape(t, (3, 2)).tolist() == [[1, 2], [3, 4], [5, 6]]

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(zeros((2, 3)), (4, 2))


class TestElementwise:
    def test_add(self):
        assert ewise_add(as_tensor([1, 2]), as_tensor([3, 4])).tolist() == [4, 6]

    def test_max(self):
        assert ewise_max(as_tensor([1, 5]), as_tensor([4, 2])).tolist() == [4, 5]

    def test_scale_zero(self):
        assert scale(as_tensor([1, 2]), 0).tolist() == [0, 0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ewise_add(zeros((2,)), zeros((3,)))


class TestMatmul:
    def test_identity(self):
        a = as_tensor([[1, 2], [3, 4]])
        assert matmul(np.eye(2, dtype=np.float32), a).tolist() == [[1, 2], [3, 4]]

    def test_hand_value(self):
        assert matmul(as_tensor([[1, 2]]), as_tensor([[3], [4]])).tolist() == [[11]]

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(zeros((2, 3)), zeros((2, 2)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 6), st.integers(0, 2**32 - 1),
           st.sampled_from([np.float32, np.float64]))
    def test_bitwise_equal_to_triple_loop(self, m, k, n, seed, dtype):
        r = np.random.default_rng(seed)
        a = r.standard_normal((m, k)).astype(dtype)
        b = r.standard_normal((k, n)).astype(dtype)
        got = matmul(a, b)
        assert got.dtype == dtype
        assert got.tobytes() == triple_loop(a, b).tobytes()

    def test_blas_path_close(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(a, b, deterministic=False), matmul(a, b), rtol=1e-12)


class TestRng:
    def test_reproducible(self):
        assert make_rng(7, 1).random(4).tobytes() == make_rng(7, 1).random(4).tobytes()

    def test_streams_differ(self):
        assert make_rng(7, 1).random(4).tobytes() != make_rng(7, 2).random(4).tobytes()

    def test_negative_seed(self):
        with pytest.raises(ValueError):
            make_rng(-1)

    def test_deterministic_mode_context(self):
        with deterministic_mode(True):
            x = matmul(np.ones((2, 2)), np.ones((2, 2)), deterministic=False)
        with deterministic_mode(False):
            pass
        assert x.tolist() == [[2, 2], [2, 2]]
