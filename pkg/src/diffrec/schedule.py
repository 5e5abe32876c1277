"""Noise schedules and every quantity derived from them.

Three families are supported, all precomputed into one table indexed by the
diffusion step n (0..N, with step 0 the noise-free convention entry):

  sqrt    signal fraction 1 - sqrt(n/N + 0.0001); fast early noise growth
  cosine  squared-cosine signal fraction, smooth noise growth
  linear  per-step noise linearly interpolated from 1e-4 to 0.02

For the sqrt and cosine families the signal fraction is primary and is
clamped into [1e-5, 1 - 1e-5] before per-step noise is derived (the raw sqrt
formula goes negative at n = N). Where the clamp would flatten several
trailing steps onto the floor (cosine at large N), the tail is tapered so
the fraction still decreases strictly and every per-step noise stays
positive. For linear the per-step noise is primary and the signal fraction
is its exact running product, so the beta/alpha-bar convertibility identity
holds by construction for all three.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("sqrt", "cosine", "linear")

_ALPHA_BAR_FLOOR = 1e-5
_ALPHA_BAR_CEIL = 1.0 - 1e-5

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02

_MIN_TAIL_BETA = 1e-6


def _beta_from_alpha_bar(alpha_bar: np.ndarray) -> np.ndarray:
    """Clamp a raw signal-fraction curve and derive per-step noise from it.

    Entries away from the clamp bounds are left bit-identical to the raw
    formula values. Where several trailing entries hit the floor, they are
    tapered (backward pass) so the curve stays strictly decreasing with
    per-step noise of at least _MIN_TAIL_BETA.
    """
    steps = alpha_bar.shape[0] - 1
    alpha_bar[1:] = np.clip(alpha_bar[1:], _ALPHA_BAR_FLOOR, _ALPHA_BAR_CEIL)
    for i in range(steps - 1, 0, -1):
        required = alpha_bar[i + 1] / (1.0 - _MIN_TAIL_BETA)
        if alpha_bar[i] < required:
            alpha_bar[i] = required
    beta = np.empty(steps + 1)
    beta[0] = 0.0
    beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return beta


@dataclass(frozen=True)
class ScheduleTable:
    """Precomputed schedule, float64, indexed directly by step n.

    Index 0 holds the noise-free convention values (beta 0, alpha_bar 1) so
    that posterior coefficients at n = 1 can reference step 0. The posterior
    coefficient arrays are NaN at index 0; they are only defined for n >= 1.
    """

    kind: str
    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    coef_clean: np.ndarray   # weight of h^0 in the posterior mean
    coef_noisy: np.ndarray   # weight of h^n in the posterior mean

    def check_step(self, n: int) -> None:
        if not 1 <= n <= self.steps:
            raise IndexError(f"diffusion step {n} out of range [1, {self.steps}]")


def make_schedule(kind: str, steps: int) -> ScheduleTable:
    """Build the full table for one schedule family."""
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if steps < 2:
        raise ValueError(f"need at least 2 diffusion steps, got {steps}")

    n = np.arange(0, steps + 1, dtype=np.float64)
    if kind == "sqrt":
        alpha_bar = 1.0 - np.sqrt(n / steps + 0.0001)
        alpha_bar[0] = 1.0
        beta = _beta_from_alpha_bar(alpha_bar)
    elif kind == "cosine":
        g = np.cos((n / steps + 0.008) / 1.008 * (np.pi / 2.0)) ** 2
        alpha_bar = g / g[0]
        beta = _beta_from_alpha_bar(alpha_bar)
    else:
        beta = np.empty(steps + 1)
        beta[0] = 0.0
        beta[1:] = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, steps)
        alpha_bar = np.cumprod(1.0 - beta)

    alpha = 1.0 - beta
    prev = alpha_bar[:-1]
    cur = alpha_bar[1:]

    beta_tilde = np.zeros(steps + 1)
    beta_tilde[1:] = (1.0 - prev) / (1.0 - cur) * beta[1:]

    coef_clean = np.full(steps + 1, np.nan)
    coef_clean[1:] = np.sqrt(prev) * beta[1:] / (1.0 - cur)
    coef_noisy = np.full(steps + 1, np.nan)
    coef_noisy[1:] = np.sqrt(alpha[1:]) * (1.0 - prev) / (1.0 - cur)

    return ScheduleTable(kind=kind, steps=steps, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, beta_tilde=beta_tilde,
                         coef_clean=coef_clean, coef_noisy=coef_noisy)


def posterior_coeffs(table: ScheduleTable, n: int) -> tuple[float, float, float]:
    """Posterior-mean weights and variance for step n: (clean, noisy, beta_tilde)."""
    table.check_step(n)
    return (float(table.coef_clean[n]),
            float(table.coef_noisy[n]),
            float(table.beta_tilde[n]))


def schedule_rows(table: ScheduleTable):
    """(n, beta, alpha_bar, beta_tilde) rows for n = 0..N, for CSV export."""
    for i in range(table.steps + 1):
        yield i, table.beta[i], table.alpha_bar[i], table.beta_tilde[i]
