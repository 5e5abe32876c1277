"""Single-step diffusion training: per-sequence step sampling weighted by
recent loss history, the combined denoising + recommendation objective, and
the epoch loop (forward noising, denoiser, Adam step, history update)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import data, engine
from .data import PAD_ID, InteractionDataset
from .engine import Tensor
from .model import DsrConfig, DsrParams, forward
from .optim import AdamState, adam_step, clip_global_norm
from .rng import RngStreams
from .schedule import ScheduleTable


class ImportanceSampler:
    """Per-step loss history driving the step-sampling distribution.

    Keeps the most recent `history` loss values per step in a ring buffer.
    Sampling is uniform until every step has a full buffer; afterwards the
    probability of a step is proportional to the root mean square of its
    buffered losses, so currently-hard steps are drawn more often.
    """

    def __init__(self, steps: int, history: int = 10):
        if steps < 1 or history < 1:
            raise ValueError("steps and history must be positive")
        self.steps = steps
        self.history = history
        self.values = np.zeros((steps, history), dtype=np.float64)
        self.counts = np.zeros(steps, dtype=np.int64)
        self.write_pos = np.zeros(steps, dtype=np.int64)
        self._probs: Optional[np.ndarray] = None

    @property
    def warm(self) -> bool:
        return bool((self.counts >= self.history).all())

    def probabilities(self) -> np.ndarray:
        """Current sampling distribution over steps 1..N (index 0 = step 1)."""
        if not self.warm:
            return np.full(self.steps, 1.0 / self.steps)
        if self._probs is None:
            rms = np.sqrt(np.mean(self.values ** 2, axis=1))
            rms = np.maximum(rms, 1e-12)
            self._probs = rms / rms.sum()
        return self._probs

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        """Draw step indices in 1..N from the current distribution."""
        drawn = rng.choice(self.steps, size=size, p=self.probabilities())
        return drawn + 1

    def prob_of(self, n) -> np.ndarray:
        """Probability currently assigned to step(s) n (1-based)."""
        return self.probabilities()[np.asarray(n) - 1]

    def update(self, n: int, value: float) -> None:
        """Record one observed loss for step n, evicting the oldest past depth."""
        idx = int(n) - 1
        if not 0 <= idx < self.steps:
            raise IndexError(f"step {n} out of range [1, {self.steps}]")
        self.values[idx, self.write_pos[idx]] = float(value)
        self.write_pos[idx] = (self.write_pos[idx] + 1) % self.history
        self.counts[idx] = min(self.counts[idx] + 1, self.history)
        self._probs = None

    def buffer_of(self, n: int) -> np.ndarray:
        """Buffered values for step n, oldest first (for tests/serialization)."""
        idx = int(n) - 1
        count = self.counts[idx]
        if count < self.history:
            return self.values[idx, :count].copy()
        return np.roll(self.values[idx], -self.write_pos[idx]).copy()

    def state(self) -> dict:
        return {
            "steps": self.steps,
            "history": self.history,
            "values": self.values.copy(),
            "counts": self.counts.copy(),
            "write_pos": self.write_pos.copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "ImportanceSampler":
        s = cls(int(state["steps"]), int(state["history"]))
        s.values[:] = state["values"]
        s.counts[:] = state["counts"]
        s.write_pos[:] = state["write_pos"]
        return s


def sample_step(sampler: ImportanceSampler, rng: np.random.Generator) -> int:
    """One step draw from the sampler's current distribution."""
    return int(sampler.sample(rng))


@dataclass
class LossBreakdown:
    """Per-sequence loss components for one batch."""

    mse: np.ndarray            # squared denoising error at the target slot
    rec: np.ndarray            # cross-entropy of the projected prediction
    weighted_total: np.ndarray  # mse / p_n + rec
    step: np.ndarray           # sampled diffusion step per sequence


def compute_loss(items: np.ndarray, targets: np.ndarray, steps_n: np.ndarray,
                 step_probs: np.ndarray, params: DsrParams, schedule: ScheduleTable,
                 noise_rng: np.random.Generator, *,
                 train: bool = False, dropout_rng: Optional[np.random.Generator] = None,
                 rec_on_clean: bool = False,
                 forward_fn: Callable = forward) -> tuple[Tensor, LossBreakdown]:
    """Build the training objective for one batch on the autodiff tape.

    items is (B, T) with the training target in the final slot; steps_n is
    the sampled diffusion step per row and step_probs its probability (the
    importance weight is 1/p). The denoising error is always measured at the
    target slot even when noise_last_k > 1. The recommendation term scores
    the denoiser's prediction unless rec_on_clean is set, which scores the
    clean embedding instead.
    """
    items = np.asarray(items)
    targets = np.asarray(targets)
    if (targets == PAD_ID).any():
        raise ValueError("a training target is the padding id")
    config = params.config
    batch, seq_len = items.shape
    noise_k = config.noise_last_k
    dtype = params["item_embedding"].dtype

    h0 = engine.gather(params["item_embedding"], items)
    ab = schedule.alpha_bar[steps_n].astype(dtype)
    eps = noise_rng.standard_normal((batch, noise_k, config.dim)).astype(dtype)

    clean_ctx = engine.narrow(h0, 1, 0, seq_len - noise_k)
    tail = engine.narrow(h0, 1, seq_len - noise_k, noise_k)
    noised = engine.add_const(
        engine.mul_const(tail, np.sqrt(ab)[:, None, None]),
        np.sqrt(1.0 - ab)[:, None, None] * eps,
    )
    hn = engine.concat([clean_ctx, noised], axis=1)

    predicted = forward_fn(params, hn, steps_n, items, train=train, rng=dropout_rng)

    h0_target = engine.reshape(engine.narrow(h0, 1, seq_len - 1, 1), (batch, config.dim))
    mse_rows = engine.sq_norm_rows(engine.sub(h0_target, predicted))

    rec_input = h0_target if rec_on_clean else predicted
    logits = engine.add(
        engine.matmul(rec_input, engine.transpose(params["output.w"], (1, 0))),
        params["output.b"],
    )
    rec_rows = engine.cross_entropy_logits(logits, targets)

    weights = (1.0 / np.asarray(step_probs)).astype(dtype)
    weighted = engine.add(engine.mul_const(mse_rows, weights), rec_rows)
    loss = engine.mean_all(weighted)
    engine.assert_finite(loss.data, "training loss")

    breakdown = LossBreakdown(
        mse=np.array(mse_rows.data, dtype=np.float64),
        rec=np.array(rec_rows.data, dtype=np.float64),
        weighted_total=np.array(weighted.data, dtype=np.float64),
        step=np.asarray(steps_n).copy(),
    )
    return loss, breakdown


def update_history(sampler: ImportanceSampler, breakdown: LossBreakdown) -> None:
    """Record each sequence's denoising loss at its sampled step."""
    for n, value in zip(breakdown.step, breakdown.mse):
        sampler.update(int(n), float(value))


@dataclass
class EpochStats:
    mean_mse: float
    mean_rec: float
    sequences: int
    seconds: float

    @property
    def sequences_per_second(self) -> float:
        return self.sequences / self.seconds if self.seconds > 0 else float("inf")


def train_epoch(dataset: InteractionDataset, params: DsrParams,
                sampler: ImportanceSampler, opt: AdamState,
                schedule: ScheduleTable, streams: RngStreams, *,
                batch_size: int = 256, grad_clip: float = 5.0,
                per_batch_step_sampling: bool = False,
                rec_on_clean: bool = False,
                forward_fn: Callable = forward) -> EpochStats:
    """One pass over the training split: sample steps, noise, denoise, update."""
    if dataset.num_users == 0:
        raise ValueError("empty dataset")
    config = params.config
    order = streams.get("shuffle").permutation(dataset.num_users)
    step_rng = streams.get("step-sampler")
    noise_rng = streams.get("diffusion-noise")
    dropout_rng = streams.get("dropout")

    mse_sum = 0.0
    rec_sum = 0.0
    rows = 0
    started = time.perf_counter()
    for _, items, targets in data.make_batches(dataset, "train", config.seq_len,
                                               batch_size, order=order):
        batch = items.shape[0]
        if per_batch_step_sampling:
            steps_n = np.full(batch, sample_step(sampler, step_rng), dtype=np.int64)
        else:
            steps_n = sampler.sample(step_rng, size=batch).astype(np.int64)
        step_probs = sampler.prob_of(steps_n)

        loss, breakdown = compute_loss(
            items, targets, steps_n, step_probs, params, schedule, noise_rng,
            train=True, dropout_rng=dropout_rng, rec_on_clean=rec_on_clean,
            forward_fn=forward_fn,
        )
        engine.zero_grads(params.tensors.values())
        engine.backward(loss)
        grads = {name: t.grad for name, t in params.tensors.items() if t.grad is not None}
        clip_global_norm(grads, grad_clip)
        adam_step(params.tensors, grads, opt)
        engine.zero_grads(params.tensors.values())
        update_history(sampler, breakdown)

        mse_sum += float(breakdown.mse.sum())
        rec_sum += float(breakdown.rec.sum())
        rows += batch
    seconds = time.perf_counter() - started
    return EpochStats(mean_mse=mse_sum / rows, mean_rec=rec_sum / rows,
                      sequences=rows, seconds=seconds)
