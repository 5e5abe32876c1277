"""Next-item prediction: the full reverse chain and the efficient one-shot,
seed-averaged variant.

Both modes build the sequence's clean embeddings, replace the final slot
(occupied by the placeholder token) with its closed-form noised value at
step N, and project the denoised prediction to item probabilities. The full
chain walks every reverse step; the efficient mode denoises in a single
call per seed and averages the per-seed distributions.

Noise is keyed by (seed, user_index) so results do not depend on batch
composition or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import engine
from .data import PAD_ID, UNK_ID
from .diffusion import embed_sequence, project_to_items, reverse_step
from .engine import Tensor
from .model import DsrParams, denoise, forward
from .rng import independent_rng
from .schedule import ScheduleTable

INFERENCE_MODES = ("full_chain", "efficient")


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "efficient"
    seeds: tuple = tuple(range(10))

    def __post_init__(self):
        if self.mode not in INFERENCE_MODES:
            raise ValueError(f"unknown inference mode {self.mode!r}")
        if not self.seeds:
            raise ValueError("need at least one inference seed")


@dataclass
class PredictionResult:
    probabilities: np.ndarray            # (V,), sums to 1
    ranking: np.ndarray                  # real item ids, best first
    per_seed: Optional[np.ndarray] = None  # (num_seeds, V) when retained


def prepare_inference_sequence(history: Sequence[int], seq_len: int) -> np.ndarray:
    """Last seq_len-1 interactions followed by the placeholder, left-padded."""
    history = list(history)
    if not history:
        raise ValueError("cannot build an inference sequence from empty history")
    kept = history[-(seq_len - 1):]
    row = [PAD_ID] * (seq_len - 1 - len(kept)) + kept + [UNK_ID]
    return np.array(row, dtype=np.int64)


def _noised_final_state(h0: np.ndarray, eps: np.ndarray, schedule: ScheduleTable) -> np.ndarray:
    """Closed-form noised value of the final slot at step N (one row per batch row)."""
    ab = schedule.alpha_bar[schedule.steps]
    return np.sqrt(ab) * h0 + np.sqrt(1.0 - ab) * eps


def _check_inference_rows(rows: np.ndarray) -> None:
    if (rows[:, -1] != UNK_ID).any():
        raise ValueError("inference sequences must end in the placeholder token")


def efficient_probs_batch(rows: np.ndarray, user_indices: np.ndarray,
                          params: DsrParams, schedule: ScheduleTable,
                          seeds: Sequence[int], keep_per_seed: bool = False):
    """Seed-averaged item probabilities for a batch of inference rows."""
    rows = np.atleast_2d(np.asarray(rows))
    _check_inference_rows(rows)
    user_indices = np.asarray(user_indices)
    batch, seq_len = rows.shape
    dim = params.config.dim
    dtype = params["item_embedding"].dtype

    h0 = params.embedding[rows]
    proj = params.projection()
    total = np.zeros((batch, params.vocab_size), dtype=np.float64)
    per_seed = [] if keep_per_seed else None
    steps_n = np.full(batch, schedule.steps, dtype=np.int64)
    for seed in seeds:
        eps = np.stack([
            independent_rng(seed, int(u)).standard_normal(dim) for u in user_indices
        ]).astype(dtype)
        hn = h0.copy()
        hn[:, -1, :] = _noised_final_state(h0[:, -1, :], eps, schedule)
        with engine.no_grad():
            predicted = forward(params, Tensor(hn), steps_n, rows).data
        probs = project_to_items(predicted, proj)
        total += probs
        if per_seed is not None:
            per_seed.append(probs)
    mean = (total / len(seeds))
    return mean, (np.stack(per_seed) if per_seed is not None else None)


def infer_efficient(sequence, params: DsrParams, schedule: ScheduleTable,
                    config: InferenceConfig, user_index: int = 0,
                    keep_per_seed: bool = False) -> PredictionResult:
    """Single-call denoising from step N, averaged over the seed list."""
    mean, per_seed = efficient_probs_batch(
        np.asarray(sequence)[None], np.array([user_index]), params, schedule,
        config.seeds, keep_per_seed=keep_per_seed,
    )
    probs = mean[0]
    return PredictionResult(probabilities=probs, ranking=full_ranking(probs),
                            per_seed=per_seed[:, 0] if per_seed is not None else None)


def infer_full_chain(sequence, params: DsrParams, schedule: ScheduleTable,
                     seed: int = 0, user_index: int = 0,
                     denoise_fn=None) -> PredictionResult:
    """Walk the reverse chain from step N down to the deterministic final call.

    The chain state is sampled once before the loop; each iteration denoises
    the current state and applies one stochastic reverse transition. The
    n=1 -> 0 transition is the plain denoiser prediction. denoise_fn may
    replace the model (oracle denoisers in tests); it receives
    (values, step, item_ids) and returns the predicted clean target row.
    """
    sequence = np.asarray(sequence)
    _check_inference_rows(sequence[None])
    rng = independent_rng(seed, int(user_index))
    dim = params.config.dim
    dtype = params["item_embedding"].dtype

    if denoise_fn is None:
        def denoise_fn(values, step, item_ids):
            return denoise(values, step, params, item_ids)

    h0 = embed_sequence(sequence, params.embedding)
    state = h0.values.copy()
    eps = rng.standard_normal(dim).astype(dtype)
    state[-1] = _noised_final_state(state[-1], eps, schedule)

    for n in range(schedule.steps, 1, -1):
        predicted = denoise_fn(state, n, sequence)
        step_eps = rng.standard_normal(dim).astype(dtype)
        state[-1] = reverse_step(state[-1], predicted, n, schedule, step_eps)

    final = denoise_fn(state, 1, sequence)
    probs = project_to_items(final, params.projection())
    return PredictionResult(probabilities=probs, ranking=full_ranking(probs))


def full_ranking(probabilities: np.ndarray, exclusions=()) -> np.ndarray:
    """All rankable item ids by descending probability, ties to the smaller id.

    The padding and placeholder ids are never rankable; exclusions removes
    further ids (e.g. a user's already-seen items).
    """
    probs = np.asarray(probabilities)
    banned = {PAD_ID, UNK_ID, *map(int, exclusions)}
    ids = np.array([i for i in range(probs.shape[0]) if i not in banned], dtype=np.int64)
    order = np.lexsort((ids, -probs[ids]))
    return ids[order]


def rank_items(probabilities: np.ndarray, k: int, exclusions=()) -> np.ndarray:
    """Top-k rankable item ids (see full_ranking for the ordering rule)."""
    ranked = full_ranking(probabilities, exclusions)
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds the {len(ranked)} rankable items")
    return ranked[:k]
