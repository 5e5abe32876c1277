import importlib

import numpy as np
import pytest

from diffrec.kernels import numpy_backend

ext = None
try:
    ext = importlib.import_module("diffrec.kernels._ext")
except ImportError:
    pass

needs_ext = pytest.mark.skipif(ext is None, reason="compiled extension not built")

DTYPES = (np.float32, np.float64)


def _tol(dtype):
    return dict(rtol=2e-5, atol=2e-6) if dtype == np.float32 else dict(rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("dtype", DTYPES)
class TestBackendsAgree:
    def test_softmax_pair(self, rng, dtype):
        x = rng.standard_normal((4, 3, 11)).astype(dtype) * 3
        gy = rng.standard_normal(x.shape).astype(dtype)
        y_np = numpy_backend.softmax_last(x)
        y_ext = ext.softmax_last(x)
        np.testing.assert_allclose(y_ext, y_np, **_tol(dtype))
        np.testing.assert_allclose(ext.softmax_last_grad(y_np, gy),
                                   numpy_backend.softmax_last_grad(y_np, gy),
                                   **_tol(dtype))

    def test_layer_norm_pair(self, rng, dtype):
        x = rng.standard_normal((6, 9)).astype(dtype)
        gamma = (1 + 0.1 * rng.standard_normal(9)).astype(dtype)
        beta = rng.standard_normal(9).astype(dtype)
        gy = rng.standard_normal(x.shape).astype(dtype)
        y_np, m_np, r_np = numpy_backend.layer_norm(x, gamma, beta, 1e-5)
        y_ext, m_ext, r_ext = ext.layer_norm(x, gamma, beta, 1e-5)
        np.testing.assert_allclose(y_ext, y_np, **_tol(dtype))
        assert m_ext.shape == m_np.shape and r_ext.shape == r_np.shape
        g_np = numpy_backend.layer_norm_grad(x, m_np, r_np, gamma, gy)
        g_ext = ext.layer_norm_grad(x, m_ext, r_ext, gamma, gy)
        for a, b in zip(g_ext, g_np):
            np.testing.assert_allclose(a, b, **_tol(dtype))
            assert a.dtype == b.dtype

    def test_gelu_pair(self, rng, dtype):
        x = rng.standard_normal(64).astype(dtype) * 2
        gy = rng.standard_normal(64).astype(dtype)
        np.testing.assert_allclose(ext.gelu(x), numpy_backend.gelu(x), **_tol(dtype))
        np.testing.assert_allclose(ext.gelu_grad(x, gy),
                                   numpy_backend.gelu_grad(x, gy), **_tol(dtype))

    def test_adam_pair(self, rng, dtype):
        p1 = rng.standard_normal(40).astype(dtype)
        p2 = p1.copy()
        m1 = np.zeros_like(p1)
        v1 = np.zeros_like(p1)
        m2, v2 = m1.copy(), v1.copy()
        for t in (1, 2, 3):
            g = rng.standard_normal(40).astype(dtype)
            ext.adam_update(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, t)
            numpy_backend.adam_update(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, t)
        np.testing.assert_allclose(p1, p2, **_tol(dtype))

    def test_embedding_grad_pair(self, rng, dtype):
        g1 = np.zeros((9, 5), dtype=dtype)
        g2 = g1.copy()
        ids = rng.integers(0, 9, size=12)
        gout = rng.standard_normal((12, 5)).astype(dtype)
        ext.embedding_grad(g1, ids, gout)
        numpy_backend.embedding_grad(g2, ids, gout)
        np.testing.assert_allclose(g1, g2, **_tol(dtype))


class TestNumpyBackendProperties:
    def test_softmax_handles_extremes(self):
        x = np.array([[1000.0, 0.0, -1000.0]])
        y = numpy_backend.softmax_last(x)
        assert np.isfinite(y).all() and y.sum() == pytest.approx(1.0)

    def test_duplicate_ids_accumulate(self):
        table = np.zeros((4, 2))
        numpy_backend.embedding_grad(table, np.array([1, 1, 1]), np.ones((3, 2)))
        np.testing.assert_array_equal(table[1], [3.0, 3.0])
