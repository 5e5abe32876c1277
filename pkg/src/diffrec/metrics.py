"""Full-catalog ranking evaluation: hit ratio and NDCG at K under the
leave-one-out protocol (one held-out target per user, no sampled negatives)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import PAD_ID, UNK_ID, InteractionDataset, make_batches
from .inference import InferenceConfig, efficient_probs_batch, infer_full_chain
from .model import DsrParams
from .schedule import ScheduleTable

DEFAULT_KS = (5, 10, 20)


def rank_of_target(probabilities: np.ndarray, target: int, exclusions=()) -> int:
    """1-indexed rank of the target among rankable items.

    Ties are broken toward the smaller item id, matching the ranking rule
    used everywhere else. Padding and the placeholder are never rankable.
    """
    probs = np.asarray(probabilities)
    target = int(target)
    if target in (PAD_ID, UNK_ID):
        raise ValueError("target is a reserved id")
    banned = {PAD_ID, UNK_ID, *map(int, exclusions)}
    if target in banned:
        raise ValueError("target is excluded from ranking")
    allowed = np.ones(probs.shape[0], dtype=bool)
    allowed[list(banned)] = False
    p_t = probs[target]
    higher = int((allowed & (probs > p_t)).sum())
    tied_smaller = int((allowed & (probs == p_t) & (np.arange(probs.shape[0]) < target)).sum())
    return 1 + higher + tied_smaller


def hr_at_k(rank: int, k: int) -> float:
    """1.0 when the target landed in the top k, else 0.0."""
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Discounted gain 1/log2(rank+1) for a single relevant item, 0 past k."""
    if rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricsReport:
    ks: tuple
    hr: dict
    ndcg: dict
    users: int
    ranks: Optional[np.ndarray] = field(default=None, repr=False)

    def as_dict(self) -> dict:
        out = {}
        for k in self.ks:
            out[f"HR@{k}"] = self.hr[k]
        for k in self.ks:
            out[f"NDCG@{k}"] = self.ndcg[k]
        return out


def _report_from_ranks(ranks: np.ndarray, ks, keep_ranks: bool) -> MetricsReport:
    hr = {k: float(np.mean([hr_at_k(r, k) for r in ranks])) for k in ks}
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in ks}
    return MetricsReport(ks=tuple(ks), hr=hr, ndcg=ndcg, users=len(ranks),
                         ranks=ranks if keep_ranks else None)


def _user_exclusions(dataset: InteractionDataset, u: int, exclude_seen: bool):
    return set(dataset.train_prefix(u)) if exclude_seen else ()


def evaluate_model(dataset: InteractionDataset, split: str, params: DsrParams,
                   schedule: ScheduleTable, config: InferenceConfig,
                   ks=DEFAULT_KS, batch_size: int = 512,
                   exclude_seen: bool = False, keep_ranks: bool = False) -> MetricsReport:
    """Rank every user's held-out target and average HR/NDCG at each K.

    Per-user ranks are accumulated by dataset index, so the report does not
    depend on iteration or batching order.
    """
    if dataset.num_users == 0:
        raise ValueError("empty evaluation split")
    seq_len = params.config.seq_len
    ranks = np.zeros(dataset.num_users, dtype=np.int64)
    for users, rows, targets in make_batches(dataset, split, seq_len, batch_size):
        if config.mode == "efficient":
            probs, _ = efficient_probs_batch(rows, users, params, schedule, config.seeds)
        else:
            probs = np.stack([
                infer_full_chain(rows[i], params, schedule,
                                 seed=config.seeds[0], user_index=int(users[i])).probabilities
                for i in range(len(users))
            ])
        for i, u in enumerate(users):
            ranks[u] = rank_of_target(probs[i], int(targets[i]),
                                      _user_exclusions(dataset, int(u), exclude_seen))
    return _report_from_ranks(ranks, ks, keep_ranks)


def popularity_scores(dataset: InteractionDataset) -> np.ndarray:
    """Training-split interaction counts per vocabulary id."""
    scores = np.zeros(dataset.vocab_size, dtype=np.float64)
    for u in range(dataset.num_users):
        for vid in dataset.train_prefix(u):
            scores[vid] += 1.0
    return scores


def evaluate_scores(dataset: InteractionDataset, split: str, scores: np.ndarray,
                    ks=DEFAULT_KS, exclude_seen: bool = False,
                    keep_ranks: bool = False) -> MetricsReport:
    """Evaluate a fixed score vector (e.g. the popularity baseline) on a split."""
    if split not in ("valid", "test"):
        raise ValueError(f"score evaluation applies to valid/test, got {split!r}")
    ranks = np.zeros(dataset.num_users, dtype=np.int64)
    for u in range(dataset.num_users):
        target = dataset.valid_target(u) if split == "valid" else dataset.test_target(u)
        ranks[u] = rank_of_target(scores, target, _user_exclusions(dataset, u, exclude_seen))
    return _report_from_ranks(ranks, ks, keep_ranks)
