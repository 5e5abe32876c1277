"""Pure-numpy implementations of the hot kernels.

Reference semantics for the compiled extension: same signatures, same
numerics up to floating-point associativity. Everything takes and returns
C-contiguous float32/float64 arrays.
"""

from __future__ import annotations

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def softmax_last(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, numerically stabilized."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last_grad(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward of softmax_last given its output y and upstream gradient gy."""
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Normalize over the last axis; returns (y, mean, rstd) for backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * rstd * gamma + beta
    return y, mean, rstd


def layer_norm_grad(x, mean, rstd, gamma, gy):
    """Backward of layer_norm; returns (gx, ggamma, gbeta)."""
    xhat = (x - mean) * rstd
    gyg = gy * gamma
    m1 = gyg.mean(axis=-1, keepdims=True)
    m2 = (gyg * xhat).mean(axis=-1, keepdims=True)
    gx = rstd * (gyg - m1 - xhat * m2)
    lead = tuple(range(x.ndim - 1))
    ggamma = (gy * xhat).sum(axis=lead)
    gbeta = gy.sum(axis=lead)
    return gx.astype(x.dtype, copy=False), ggamma, gbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian-error linear unit, tanh form: 0.5*x*(1+tanh(c*(x+a*x^3)))."""
    return gelu_fwd(x)[0]


def gelu_fwd(x: np.ndarray):
    """Returns (y, t) where t is the cached tanh term reused by the backward."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False), t.astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray, gy: np.ndarray, t=None) -> np.ndarray:
    if t is None:
        t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return (gy * slope).astype(x.dtype, copy=False)


def adam_update(p, g, m, v, lr: float, b1: float, b2: float, eps: float, t: int) -> None:
    """Bias-corrected Adam step, in place on p, m, v. t is the 1-based step count."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * np.square(g)
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def embedding_grad(gtable: np.ndarray, ids: np.ndarray, gout: np.ndarray) -> None:
    """Scatter-add gout rows into gtable at ids, in place."""
    np.add.at(gtable, ids, gout)
