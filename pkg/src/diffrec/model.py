"""The denoising sequence model: a transformer encoder over item embeddings
plus learnable position embeddings and a sinusoidal diffusion-step embedding,
returning the denoised representation at the final (target) position.

Attention is bidirectional with key-padding masking; a causal option exists
for experimentation. Layers are post-norm with a 4x feed-forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine
from .data import PAD_ID
from .diffusion import HiddenSequence, OutputProjection
from .engine import Tensor

MASK_BIAS = -1e9


@dataclass
class DsrConfig:
    dim: int = 256
    seq_len: int = 50
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    steps: int = 1000
    schedule: str = "sqrt"
    activation: str = "gelu"
    causal_attention: bool = False
    use_position_embedding: bool = True
    use_step_embedding: bool = True
    noise_last_k: int = 1

    def validate(self) -> "DsrConfig":
        if self.dim <= 0 or self.seq_len <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ValueError("dim, seq_len, layers and heads must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ValueError("dim must be even for the sinusoidal step embedding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} out of range [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 1 <= self.noise_last_k <= self.seq_len:
            raise ValueError("noise_last_k must be in [1, seq_len]")
        return self


@dataclass
class ForwardCounter:
    """Counts denoiser forward passes; used by complexity-contract tests."""

    calls: int = 0
    rows: int = 0

    def reset(self) -> None:
        self.calls = 0
        self.rows = 0


FORWARD_COUNTER = ForwardCounter()


class DsrParams:
    """Named parameter tensors in a fixed declaration order."""

    def __init__(self, tensors: dict, config: DsrConfig, vocab_size: int):
        self.tensors = tensors
        self.config = config
        self.vocab_size = vocab_size

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    @property
    def embedding(self) -> np.ndarray:
        return self.tensors["item_embedding"].data

    def projection(self) -> OutputProjection:
        return OutputProjection(w=self.tensors["output.w"].data,
                                b=self.tensors["output.b"].data)

    def clone(self) -> "DsrParams":
        cloned = {name: engine.parameter(t.data.copy(), name)
                  for name, t in self.tensors.items()}
        return DsrParams(cloned, replace(self.config), self.vocab_size)


def init_params(config: DsrConfig, vocab_size: int, rng: np.random.Generator,
                dtype=np.float32) -> DsrParams:
    """Allocate and initialize all learnable tensors (truncated normal 0.02)."""
    config.validate()
    if vocab_size < 3:
        raise ValueError("vocabulary needs at least padding, placeholder and one item")
    d = config.dim

    def tn(shape):
        return engine.trunc_normal(shape, 0.02, rng, dtype)

    tensors: dict = {}

    def add(name, value):
        tensors[name] = engine.parameter(value, name)

    add("item_embedding", tn((vocab_size, d)))
    add("position_embedding", tn((config.seq_len, d)))
    for i in range(config.layers):
        pre = f"layers.{i}."
        for proj in ("wq", "wk", "wv", "wo"):
            add(pre + "attn." + proj, tn((d, d)))
        for bias in ("bq", "bk", "bv", "bo"):
            add(pre + "attn." + bias, np.zeros(d, dtype=dtype))
        add(pre + "norm1.gamma", np.ones(d, dtype=dtype))
        add(pre + "norm1.beta", np.zeros(d, dtype=dtype))
        add(pre + "ffn.w1", tn((d, 4 * d)))
        add(pre + "ffn.b1", np.zeros(4 * d, dtype=dtype))
        add(pre + "ffn.w2", tn((4 * d, d)))
        add(pre + "ffn.b2", np.zeros(d, dtype=dtype))
        add(pre + "norm2.gamma", np.ones(d, dtype=dtype))
        add(pre + "norm2.beta", np.zeros(d, dtype=dtype))
    add("output.w", tn((vocab_size, d)))
    add("output.b", np.zeros(vocab_size, dtype=dtype))
    return DsrParams(tensors, config, vocab_size)


def step_embedding(n, dim: int) -> np.ndarray:
    """Sinusoidal diffusion-step embedding, sin/cos interleaved.

    Accepts a scalar step (returns (dim,)) or an array of steps (returns
    (len, dim)).
    """
    if dim % 2:
        raise ValueError(f"step embedding width must be even, got {dim}")
    n = np.asarray(n, dtype=np.float64)
    scalar = n.ndim == 0
    n = np.atleast_1d(n)
    j = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, 2.0 * j / dim)
    angles = n[:, None] * freq[None, :]
    out = np.empty((n.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out[0] if scalar else out


def assemble_input(hidden, step, params: DsrParams, config: DsrConfig) -> np.ndarray:
    """Sum sequence representation, position embedding and step embedding.

    The step embedding is added at every position; ablation flags zero out
    either embedding. Accepts (T, d) or (B, T, d) arrays (or HiddenSequence).
    """
    if isinstance(hidden, HiddenSequence):
        step = hidden.step
        hidden = hidden.values
    h = np.asarray(hidden)
    out = h.copy()
    if config.use_position_embedding:
        out = out + params["position_embedding"].data
    if config.use_step_embedding:
        z = step_embedding(step, config.dim).astype(h.dtype)
        if out.ndim == 3:
            z = z.reshape(-1, 1, config.dim)
        out = out + z
    return out


def _padding_bias(item_ids: Optional[np.ndarray], batch: int, seq_len: int,
                  config: DsrConfig, dtype) -> Optional[np.ndarray]:
    bias = None
    if item_ids is not None:
        pad = (np.asarray(item_ids) == PAD_ID)
        if pad.any():
            bias = np.where(pad, MASK_BIAS, 0.0).astype(dtype)
            bias = bias.reshape(batch, 1, 1, seq_len)
    if config.causal_attention:
        tri = np.triu(np.full((seq_len, seq_len), MASK_BIAS, dtype=dtype), k=1)
        tri = tri.reshape(1, 1, seq_len, seq_len)
        bias = tri if bias is None else bias + tri
    return bias


def forward(params: DsrParams, hidden: Tensor, steps, item_ids=None, *,
            train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Denoiser forward pass on the tape: (B, T, d) -> (B, d).

    steps is the per-row diffusion step (int or (B,) array); item_ids, when
    given, supplies the key-padding mask. Dropout is active only when train
    is set and an rng is supplied.
    """
    config = params.config
    batch, seq_len, d = hidden.shape
    if seq_len != config.seq_len or d != config.dim:
        raise engine.ShapeError(
            f"forward: expected (B, {config.seq_len}, {config.dim}), got {hidden.shape}"
        )
    heads = config.heads
    head_dim = d // heads
    dtype = hidden.dtype
    drop = config.dropout if train else 0.0
    act = engine.gelu if config.activation == "gelu" else engine.relu

    x = hidden
    if config.use_position_embedding:
        x = engine.add(x, params["position_embedding"])
    if config.use_step_embedding:
        z = step_embedding(np.broadcast_to(np.asarray(steps), (batch,)), d)
        x = engine.add_const(x, z.reshape(batch, 1, d).astype(dtype))
    x = engine.dropout(x, drop, rng)

    bias = _padding_bias(item_ids, batch, seq_len, config, dtype)

    def split_heads(t: Tensor) -> Tensor:
        t = engine.reshape(t, (batch, seq_len, heads, head_dim))
        return engine.transpose(t, (0, 2, 1, 3))

    for i in range(config.layers):
        pre = f"layers.{i}."
        q = engine.add(engine.matmul(x, params[pre + "attn.wq"]), params[pre + "attn.bq"])
        k = engine.add(engine.matmul(x, params[pre + "attn.wk"]), params[pre + "attn.bk"])
        v = engine.add(engine.matmul(x, params[pre + "attn.wv"]), params[pre + "attn.bv"])
        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        scores = engine.mul_const(
            engine.matmul(q, engine.transpose(k, (0, 1, 3, 2))),
            1.0 / np.sqrt(head_dim),
        )
        if bias is not None:
            scores = engine.add_const(scores, bias)
        attn = engine.softmax_last(scores)
        attn = engine.dropout(attn, drop, rng)
        ctx = engine.matmul(attn, v)
        ctx = engine.reshape(engine.transpose(ctx, (0, 2, 1, 3)), (batch, seq_len, d))
        out = engine.add(engine.matmul(ctx, params[pre + "attn.wo"]), params[pre + "attn.bo"])
        out = engine.dropout(out, drop, rng)
        x = engine.layer_norm(engine.add(x, out),
                              params[pre + "norm1.gamma"], params[pre + "norm1.beta"])
        ff = engine.add(engine.matmul(x, params[pre + "ffn.w1"]), params[pre + "ffn.b1"])
        ff = act(ff)
        ff = engine.add(engine.matmul(ff, params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
        ff = engine.dropout(ff, drop, rng)
        x = engine.layer_norm(engine.add(x, ff),
                              params[pre + "norm2.gamma"], params[pre + "norm2.beta"])

    FORWARD_COUNTER.calls += 1
    FORWARD_COUNTER.rows += batch
    last = engine.narrow(x, 1, seq_len - 1, 1)
    return engine.reshape(last, (batch, d))


def denoise(hidden, step=None, params: DsrParams = None, item_ids=None, *,
            train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Numpy-facing denoiser: returns the predicted clean target representation.

    hidden may be a HiddenSequence, a (T, d) array or a (B, T, d) array; the
    return has matching (d,) or (B, d) shape.
    """
    if isinstance(hidden, HiddenSequence):
        step = hidden.step if step is None else step
        hidden = hidden.values
    h = np.asarray(hidden)
    single = h.ndim == 2
    if single:
        h = h[None]
        if item_ids is not None:
            item_ids = np.asarray(item_ids)[None]
    if step is None:
        raise ValueError("denoise needs the diffusion step")
    with engine.no_grad():
        out = forward(params, Tensor(h), step, item_ids, train=train, rng=rng).data
    engine.assert_finite(out, "denoiser output")
    return out[0] if single else out
