"""Adam optimizer with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels
from .engine import ShapeError, Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and hyperparameters."""

    lr: float = 0.001
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: Mapping[str, Tensor], lr: float = 0.001,
             b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, b1=b1, b2=b2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ShapeError(f"adam_step: shape mismatch for parameter {name!r}")
        kernels.adam_update(p.data, g, state.m[name], state.v[name],
                            state.lr, state.b1, state.b2, state.eps, state.t)
    return state


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.einsum("i,i->", g.ravel(), g.ravel(), dtype=np.float64))
    norm = float(np.sqrt(total_sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
