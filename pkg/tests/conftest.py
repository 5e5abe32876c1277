import numpy as np
import pytest

from diffrec import engine


def finite_diff(loss_fn, arrays: dict, name: str, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of loss_fn w.r.t. arrays[name] (float64)."""
    base = arrays[name]
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(arrays)
        flat[i] = orig - h
        down = loss_fn(arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(build, arrays: dict, rel_tol: float = 1e-4, h: float = 1e-4):
    """Compare tape gradients of build(tensors) against finite differences.

    build takes {name: Tensor} and returns a scalar Tensor; arrays must be
    float64. Relative error is measured per array block.
    """
    tensors = {k: engine.parameter(v, k) for k, v in arrays.items()}
    loss = build(tensors)
    engine.backward(loss)

    def loss_value(arrs):
        with engine.no_grad():
            consts = {k: engine.Tensor(v) for k, v in arrs.items()}
            return float(build(consts).data)

    for name, t in tensors.items():
        fd = finite_diff(loss_value, arrays, name, h)
        got = t.grad if t.grad is not None else np.zeros_like(fd)
        denom = max(np.linalg.norm(fd), 1e-8)
        rel = np.linalg.norm(got - fd) / denom
        assert rel < rel_tol, f"gradient mismatch for {name}: rel={rel:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
