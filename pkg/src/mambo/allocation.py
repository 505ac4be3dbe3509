"""Replication budgeting: the s-sequence floor, the stage budget and the OCBA split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_S_COEFF = 5.0


def s_sequence(i: int, c: float = DEFAULT_S_COEFF, r_min: int = 2) -> int:
    """Replication floor ``max(r_min, ceil(c * ln(i + 1)^2))``.

    Grows faster than ``ln i``, so ``sum_i i * exp(-a * s_i)`` is finite for
    every ``a > 0``.
    """
    if i < 1 or c <= 0:
        raise ValueError("need i >= 1 and c > 0")
    return max(int(r_min), math.ceil(c * math.log(i + 1) ** 2))


def stage_budget(counts, s_N: int, remaining: int) -> int:
    """Total shortfall ``sum max(0, s_N - M(x))``, capped at the remaining budget."""
    counts = np.asarray(counts, dtype=np.int64)
    demand = int(np.maximum(s_N - counts, 0).sum())
    return max(0, min(demand, int(remaining)))


def ocba_targets(means, sds, budget: float) -> np.ndarray:
    """Continuous OCBA allocation of ``budget`` new replicates.

    Non-best points get weight ``(s_i / d_{b,i})^2`` and the best point
    ``s_b * sqrt(sum_{i != b} (s_i / d_{b,i})^4 / s_i^2)``.  Tied means use a
    gap of ``1e-9`` times the range of the means (or 1 when they are all
    equal).  If every weight vanishes the budget is split equally.
    """
    y = np.asarray(means, dtype=float)
    s = np.asarray(sds, dtype=float)
    if y.ndim != 1 or y.size < 2 or s.shape != y.shape:
        raise ValueError("need matching 1-d means and sds for at least 2 points")
    if np.any(s < 0) or budget < 0:
        raise ValueError("sds and budget must be nonnegative")
    b = int(np.argmin(y))
    spread = float(np.ptp(y))
    eps = 1e-9 * (spread if spread > 0 else 1.0)
    gap = np.maximum(np.abs(y - y[b]), eps)
    w = (s / gap) ** 2
    others = np.arange(y.size) != b
    # (s_i/d_i)^4 / s_i^2 written without dividing by s_i
    w[b] = s[b] * math.sqrt(float(np.sum(s[others] ** 2 / gap[others] ** 4)))
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(y.size, budget / y.size)
    return budget * (w / total)


def largest_remainder(targets, total: int) -> np.ndarray:
    """Round nonnegative ``targets`` to integers summing exactly to ``total``."""
    t = np.asarray(targets, dtype=float)
    base = np.floor(t).astype(np.int64)
    short = int(total) - int(base.sum())
    if short < 0 or short > t.size:
        raise ValueError("targets do not sum to the requested total")
    frac = t - base
    # largest fractional part first, earlier index on ties
    order = np.lexsort((np.arange(t.size), -frac))
    base[order[:short]] += 1
    return base


def ocba_split(means, sds, budget: int) -> np.ndarray:
    """Integer OCBA allocation; the result sums to ``budget`` exactly."""
    if budget == 0:
        return np.zeros(len(means), dtype=np.int64)
    return largest_remainder(ocba_targets(means, sds, budget), budget)


def allocate(means, sds, counts, s_N: int, remaining: int) -> np.ndarray:
    """Additional replicates for one allocation stage.

    The stage budget equals the total shortfall below ``s_N`` unless the
    remaining budget caps it.  Uncapped, the shortfalls are filled exactly, so
    every point reaches the floor.  Capped, the smaller budget is split by OCBA.
    """
    counts = np.asarray(counts, dtype=np.int64)
    deficits = np.maximum(s_N - counts, 0)
    B = stage_budget(counts, s_N, remaining)
    if B == int(deficits.sum()):
        return deficits
    return ocba_split(means, sds, B)


@dataclass
class BudgetState:
    """Replication accounting for one run: ``total == consumed + remaining`` always."""

    total: int
    r_min: int = 2
    s_coeff: float = DEFAULT_S_COEFF
    remaining: int = field(init=False)

    def __post_init__(self) -> None:
        if self.r_min < 2:
            raise ValueError("r_min must be at least 2")
        if self.total < 0:
            raise ValueError("total budget must be nonnegative")
        self.remaining = int(self.total)

    @property
    def consumed(self) -> int:
        return self.total - self.remaining

    def spend(self, k: int) -> None:
        if k < 0 or k > self.remaining:
            raise ValueError(f"cannot spend {k} replications with {self.remaining} remaining")
        self.remaining -= int(k)

    def floor(self, n_points: int) -> int:
        return s_sequence(n_points, self.s_coeff, self.r_min)
