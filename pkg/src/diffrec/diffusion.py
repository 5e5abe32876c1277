"""Forward and reverse diffusion transitions over item-sequence representations.

The forward process noises only the last K positions of a sequence (default
K=1, just the target slot); all other positions keep their clean embeddings
at every step. These are the single-sequence reference operations used by
inference and tests; the trainer re-expresses the same linear combinations
on the autodiff tape.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .rng import independent_rng
from .schedule import ScheduleTable, posterior_coeffs


@dataclass(frozen=True)
class NoiseDraw:
    """A reproducible standard-normal draw, keyed by (seed, stream, counter)."""

    values: np.ndarray
    seed: int = 0
    stream: str = ""
    counter: int = 0

    @classmethod
    def draw(cls, shape, seed: int, stream: str = "diffusion-noise",
             counter: int = 0, dtype=np.float64) -> "NoiseDraw":
        rng = independent_rng(seed, zlib.crc32(stream.encode()), counter)
        return cls(values=rng.standard_normal(shape).astype(dtype),
                   seed=seed, stream=stream, counter=counter)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class HiddenSequence:
    """Sequence representation at one diffusion step.

    values is (T, d); noised_positions holds 0-based row indices that carry
    injected noise (a suffix of the sequence, empty at step 0).
    """

    values: np.ndarray
    step: int
    noised_positions: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.step < 0:
            raise ValueError(f"negative diffusion step {self.step}")


@dataclass(frozen=True)
class OutputProjection:
    """Linear map from hidden width d back to item logits."""

    w: np.ndarray  # (V, d)
    b: np.ndarray  # (V,)


def _noise_values(noise, k: int, width: int) -> np.ndarray:
    eps = np.asarray(noise)
    return eps.reshape(k, width)


def embed_sequence(items, table: np.ndarray) -> HiddenSequence:
    """Look up clean embeddings: the noise-free entry transition (step 0)."""
    items = np.asarray(items)
    if items.size and (items.min() < 0 or items.max() >= table.shape[0]):
        raise ValueError(f"item id out of vocabulary range [0, {table.shape[0]})")
    return HiddenSequence(values=table[items], step=0)


def forward_noise(h0: HiddenSequence, n: int, schedule: ScheduleTable,
                  noise, noise_last_k: int = 1) -> HiddenSequence:
    """Jump from step 0 to step n in closed form, noising only the last K rows."""
    schedule.check_step(n)
    if h0.step != 0:
        raise ValueError(f"forward_noise starts from step 0, got step {h0.step}")
    seq_len, width = h0.values.shape
    if not 1 <= noise_last_k <= seq_len:
        raise ValueError(f"noise_last_k {noise_last_k} out of range [1, {seq_len}]")
    eps = _noise_values(noise, noise_last_k, width)
    ab = schedule.alpha_bar[n]
    out = h0.values.copy()
    out[seq_len - noise_last_k:] = (
        np.sqrt(ab) * h0.values[seq_len - noise_last_k:] + np.sqrt(1.0 - ab) * eps
    )
    return HiddenSequence(values=out, step=n,
                          noised_positions=frozenset(range(seq_len - noise_last_k, seq_len)))


def forward_one_step(h: HiddenSequence, schedule: ScheduleTable,
                     noise, noise_last_k: int = 1) -> HiddenSequence:
    """Single forward transition step n-1 -> n (the Monte-Carlo oracle path)."""
    n = h.step + 1
    schedule.check_step(n)
    seq_len, width = h.values.shape
    eps = _noise_values(noise, noise_last_k, width)
    beta = schedule.beta[n]
    out = h.values.copy()
    out[seq_len - noise_last_k:] = (
        np.sqrt(1.0 - beta) * h.values[seq_len - noise_last_k:] + np.sqrt(beta) * eps
    )
    return HiddenSequence(values=out, step=n,
                          noised_positions=frozenset(range(seq_len - noise_last_k, seq_len)))


def posterior_mean(h0_last: np.ndarray, hn_last: np.ndarray, n: int,
                   schedule: ScheduleTable) -> tuple[np.ndarray, float]:
    """Mean and variance of the tractable posterior at step n for the target slot."""
    c_clean, c_noisy, beta_tilde = posterior_coeffs(schedule, n)
    return c_clean * np.asarray(h0_last) + c_noisy * np.asarray(hn_last), beta_tilde


def reverse_step(hn_last: np.ndarray, predicted_h0: np.ndarray, n: int,
                 schedule: ScheduleTable, noise) -> np.ndarray:
    """One learned reverse transition n -> n-1 (stochastic; valid for n >= 2).

    The mean uses the denoiser's clean prediction in place of the true h^0;
    the variance is the per-step noise amount beta_n (untrainable).
    """
    if n < 2:
        raise ValueError("reverse_step applies for n >= 2; the final transition is deterministic")
    schedule.check_step(n)
    c_clean, c_noisy, _ = posterior_coeffs(schedule, n)
    eps = np.asarray(noise)
    return (c_clean * np.asarray(predicted_h0) + c_noisy * np.asarray(hn_last)
            + np.sqrt(schedule.beta[n]) * eps)


def project_to_items(h0_last: np.ndarray, proj: OutputProjection) -> np.ndarray:
    """Map a clean hidden representation to a probability vector over items."""
    h = np.asarray(h0_last)
    if h.shape[-1] != proj.w.shape[1] or proj.b.shape != (proj.w.shape[0],):
        raise ValueError(
            f"projection shapes disagree: h {h.shape}, W {proj.w.shape}, b {proj.b.shape}"
        )
    logits = h @ proj.w.T + proj.b
    return kernels.softmax_last(logits)
