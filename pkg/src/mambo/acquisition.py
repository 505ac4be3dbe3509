"""Acquisition functions on the aggregated model and the inner optimiser.

Orientation is minimisation throughout: EI rewards predicted values below the
incumbent ``T``, the confidence bound is a lower bound, and Thompson sampling
picks the smallest sampled value.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr
from scipy.stats import qmc

from .aggregate import AggregatedModel, aggregated_cov_matrix, predict_aggregated
from .gp_core import CovarianceError, NEGATIVE_VARIANCE_TOL, _jittered_cholesky

logger = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
EXCLUSION_RADIUS = 1e-9


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: Literal["EI", "LCB", "Thompson"] = "EI"
    kappa: float = 2.0
    candidate_count: int = 512
    refine_steps: int = 20
    initial_step: float = 0.1  # fraction of the box width

    def __post_init__(self) -> None:
        if self.kind not in ("EI", "LCB", "Thompson"):
            raise ValueError(f"unknown acquisition kind {self.kind!r}")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be nonnegative")


def _checked_variance(variance) -> np.ndarray:
    v = np.asarray(variance, dtype=float)
    if np.any(v < -NEGATIVE_VARIANCE_TOL):
        raise ValueError("variance must be nonnegative")
    return np.maximum(v, 0.0)


def expected_improvement(mean, variance, T: float):
    """``E[(T - F)^+]`` for ``F ~ N(mean, variance)``."""
    scalar = np.ndim(mean) == 0 and np.ndim(variance) == 0
    mean = np.asarray(mean, dtype=float)
    var = _checked_variance(variance)
    delta = T - mean
    sd = np.sqrt(var)
    pos = sd > 0
    z = np.divide(delta, sd, out=np.zeros_like(delta * sd), where=pos)
    # ndtr and the density are saturated in double precision beyond |z| = 40
    np.clip(z, -40.0, 40.0, out=z)
    ei = np.where(pos, delta * ndtr(z) + sd * _INV_SQRT_2PI * np.exp(-0.5 * z * z), np.maximum(delta, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if scalar else ei


def lcb(mean, variance, kappa: float):
    """Lower confidence bound ``mean - kappa * sd``; the next point minimises it."""
    scalar = np.ndim(mean) == 0 and np.ndim(variance) == 0
    out = np.asarray(mean, dtype=float) - kappa * np.sqrt(_checked_variance(variance))
    return float(out) if scalar else out


def thompson_sample(model: AggregatedModel, candidates: np.ndarray, rng: np.random.Generator):
    """One joint posterior draw at the candidates.

    Returns ``(values, joint)``; ``joint`` is False when the covariance could
    not be factorised and independent marginal draws were used instead.
    """
    X = np.atleast_2d(candidates)
    mean, var = predict_aggregated(model, X)
    if X.shape[0] == 1:
        return mean + np.sqrt(var) * rng.standard_normal(1), True
    cov = aggregated_cov_matrix(model, X)
    cov = 0.5 * (cov + cov.T)
    scale = float(np.mean(np.diag(cov)))
    z = rng.standard_normal(X.shape[0])
    if scale <= 0:
        return mean, True
    try:
        L, _ = _jittered_cholesky(cov, scale, "aggregated candidate covariance")
    except CovarianceError:
        warnings.warn("Thompson draw fell back to independent marginals", RuntimeWarning)
        return mean + np.sqrt(var) * z, False
    return mean + L @ z, True


def thompson_pick(model: AggregatedModel, candidates, rng: np.random.Generator) -> int:
    values, _ = thompson_sample(model, np.atleast_2d(candidates), rng)
    return int(np.argmin(values))


def score(model: AggregatedModel, X: np.ndarray, spec: AcquisitionSpec, T: float):
    """Acquisition value to maximise, plus the predictive mean used for tie-breaks."""
    mean, var = predict_aggregated(model, X)
    if spec.kind == "EI":
        return expected_improvement(mean, var, T), mean
    return -lcb(mean, var, spec.kappa), mean


def latin_hypercube(n: int, lower: np.ndarray, upper: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    return lower + sampler.random(n) * (upper - lower)


def _best(values: np.ndarray, mean: np.ndarray) -> int:
    # highest value first, then lowest mean, then lowest index
    return int(np.lexsort((np.arange(values.size), mean, -values))[0])


class _Exclusion:
    def __init__(self, sampled: np.ndarray | None):
        self.tree = cKDTree(sampled) if sampled is not None and len(sampled) else None

    def allowed(self, X: np.ndarray) -> np.ndarray:
        if self.tree is None:
            return np.ones(X.shape[0], dtype=bool)
        dist, _ = self.tree.query(X, k=1, p=np.inf)
        return dist > EXCLUSION_RADIUS


def pattern_search(
    model: AggregatedModel,
    x0: np.ndarray,
    value0: float,
    mean0: float,
    lower: np.ndarray,
    upper: np.ndarray,
    spec: AcquisitionSpec,
    T: float,
    exclusion: _Exclusion,
) -> tuple[np.ndarray, float]:
    """Coordinate polling around ``x0``; moves only on strict improvement, halves the step otherwise."""
    x, best, best_mean = x0.copy(), value0, mean0
    step = spec.initial_step * (upper - lower)
    d = x.size
    for _ in range(spec.refine_steps):
        polls = np.repeat(x[None, :], 2 * d, axis=0)
        idx = np.arange(d)
        polls[idx, idx] += step
        polls[d + idx, idx] -= step
        np.clip(polls, lower, upper, out=polls)
        moved = np.any(polls != x, axis=1)
        polls = polls[moved]
        polls = polls[exclusion.allowed(polls)] if polls.size else polls
        if polls.shape[0] == 0:
            step = step / 2.0
            continue
        values, means = score(model, polls, spec, T)
        j = _best(values, means)
        if values[j] > best or (values[j] == best and means[j] < best_mean):
            x, best, best_mean = polls[j], float(values[j]), float(means[j])
        else:
            step = step / 2.0
    return x, best


def propose_next(
    model: AggregatedModel,
    lower,
    upper,
    sampled: np.ndarray | None,
    spec: AcquisitionSpec,
    T: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Next evaluation point inside the box and away from every sampled point."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)) and np.all(upper >= lower)):
        raise ValueError("box bounds must be finite with lower <= upper")
    exclusion = _Exclusion(None if sampled is None else np.atleast_2d(sampled))
    candidates = latin_hypercube(spec.candidate_count, lower, upper, rng)
    candidates = candidates[exclusion.allowed(candidates)]
    if candidates.shape[0] == 0:
        raise ValueError("every candidate coincides with a sampled point; enlarge the box or the candidate set")

    if spec.kind == "Thompson":
        return candidates[thompson_pick(model, candidates, rng)].copy()

    values, means = score(model, candidates, spec, T)
    j = _best(values, means)
    if spec.refine_steps == 0:
        return candidates[j].copy()
    x, _ = pattern_search(model, candidates[j], float(values[j]), float(means[j]), lower, upper, spec, T, exclusion)
    return x
