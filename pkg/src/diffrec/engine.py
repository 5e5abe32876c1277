"""Reverse-mode autodiff over dense numpy arrays.

A small define-by-run tape: operations on `Tensor` record a backward closure
and parent links, `backward()` walks the recorded graph in reverse
topological order. Only the primitives the recommender's graph needs are
implemented (matmul, add, elementwise, softmax, layer norm, gather, dropout
mask application, the two loss reductions); no general broadcasting beyond
what those use. Float32 is the training dtype; tests run the same graph in
float64 for tight finite-difference checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Inputs do not satisfy an operation's shape rule."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    # operator sugar; constants go through the *_const ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -np.asarray(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Accumulate g into t.grad.

    owned=True promises g is freshly computed, aliases no other parent's
    gradient, and is never read again by the caller, so it can be adopted
    without the defensive copy.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into .grad fields."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def assert_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, owned=ga is not g)
        _accum(b, _unbroadcast(g, b.shape), owned=True)

    return _result(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, owned=ga is not g)
        _accum(b, -_unbroadcast(g, b.shape), owned=True)

    return _result(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), owned=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _result(data, (a, b), bwd)


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)
    data = a.data + c

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape), owned=True)

    return _result(data, (a,), bwd)


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)
    data = a.data * c

    def bwd(g):
        _accum(a, _unbroadcast(g * c, a.shape), owned=True)

    return _result(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.data.shape[-1])
        data = (a2 @ b.data).reshape(a.data.shape[:-1] + (b.data.shape[1],))
    else:
        data = np.matmul(a.data, b.data)

    if b.data.ndim == 2 and a.data.ndim > 2:
        # stacked rows times one matrix: flatten to single gemms in backward
        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.data.shape), owned=True)
            if b.requires_grad:
                a2 = np.ascontiguousarray(a.data).reshape(-1, a.data.shape[-1])
                _accum(b, a2.T @ g2, owned=True)
    else:
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                       a.shape), owned=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                       b.shape), owned=True)

    return _result(data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape), owned=True)

    return _result(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv), owned=True)

    return _result(data, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full, owned=True)

    return _result(data, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accum(p, g[tuple(idx)], owned=True)
            offset += size

    return _result(data, tuple(parts), bwd)


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of `table` at integer `ids` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather: id out of range [0, {table.data.shape[0]}) in lookup"
        )
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            kernels.embedding_grad(table.grad, ids.ravel(),
                                   g.reshape(-1, table.data.shape[1]))

    return _result(data, (table,), bwd)


def softmax_last(a: Tensor) -> Tensor:
    y = kernels.softmax_last(a.data)

    def bwd(g):
        _accum(a, kernels.softmax_last_grad(y, g), owned=True)

    return _result(y, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.data.shape != (x.data.shape[-1],) or beta.data.shape != (x.data.shape[-1],):
        raise ShapeError("layer_norm: gamma/beta must match the last axis width")
    y, mean, rstd = kernels.layer_norm(x.data, gamma.data, beta.data, eps)

    def bwd(g):
        gx, ggamma, gbeta = kernels.layer_norm_grad(x.data, mean, rstd, gamma.data, g)
        _accum(x, gx, owned=True)
        _accum(gamma, ggamma, owned=True)
        _accum(beta, gbeta, owned=True)

    return _result(y, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    y, cdf = kernels.gelu_fwd(x.data)

    def bwd(g):
        _accum(x, kernels.gelu_grad(x.data, g, cdf), owned=True)

    return _result(y, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def bwd(g):
        _accum(x, g * (x.data > 0), owned=True)

    return _result(y, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Apply a fresh inverted-dropout mask drawn from `rng`; no-op at rate 0."""
    if rate <= 0.0 or rng is None:
        return x
    draw = rng.random(x.data.shape, dtype=np.float32)
    mask = (draw >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul_const(x, mask)


def sq_norm_rows(x: Tensor) -> Tensor:
    """Per-row squared L2 norm of a 2-D tensor: (B, d) -> (B,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"sq_norm_rows: expected 2-D input, got shape {x.shape}")
    data = np.einsum("ij,ij->i", x.data, x.data)

    def bwd(g):
        _accum(x, 2.0 * x.data * g[:, None], owned=True)

    return _result(data, (x,), bwd)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Per-row -log softmax(logits)[target]: (B, V), (B,) -> (B,)."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy_logits: got logits {logits.shape}, targets {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise ShapeError("cross_entropy_logits: target id out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    data = lse - z[rows, targets]

    def bwd(g):
        if logits.requires_grad:
            probs = kernels.softmax_last(z)
            probs[rows, targets] -= 1.0
            _accum(logits, probs * g[:, None], owned=True)

    return _result(data, (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    scale = 2.0 / diff.size

    def bwd(g):
        _accum(a, g * scale * diff, owned=True)
        _accum(b, -g * scale * diff, owned=True)

    return _result(data, (a, b), bwd)


def mean_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    n = x.data.size

    def bwd(g):
        _accum(x, np.full_like(x.data, g / n), owned=True)

    return _result(data, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        _accum(x, np.full_like(x.data, g), owned=True)

    return _result(data, (x,), bwd)


# ---------------------------------------------------------------------------
# initializers


def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Normal draws re-sampled until within 2 standard deviations, then scaled."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)
