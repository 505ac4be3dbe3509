"""Bayesian aggregation of embedded GP submodels trained on disjoint data subsets.

Each submodel sees ``n_i`` of the ``n`` design points, projected to ``d_i``
dimensions.  Its weight is the posterior model probability, with the evidence
approximated by BIC and a prior ``(n_i/n)^2 (d_i/d)^eta``.  The aggregate is a
GP with mean ``sum w_i m_i`` and covariance ``sum w_i^2 C_i``.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError
from scipy.special import logsumexp

from .embedding import Embedding, gaussian_embedding, identity_embedding, pca_embedding, project
from .gp_core import (
    KernelSpec,
    MeanPrior,
    PosteriorGP,
    ReplicatedDataset,
    default_bounds,
    estimate_hyperparameters,
    fit_gp,
    log_marginal_likelihood,
    posterior_cov_matrix,
    posterior_predict,
)

logger = logging.getLogger(__name__)

DimSampler = Callable[[int, int, np.random.Generator], int]

# submodels whose weight is this small relative to 1 do not affect predictions
_NEGLIGIBLE_WEIGHT = 1e-15


@dataclass(frozen=True)
class Submodel:
    embedding: Embedding
    subset_indices: np.ndarray
    gp: PosteriorGP
    log_evidence: float

    @property
    def n_i(self) -> int:
        return self.subset_indices.size

    @property
    def d_i(self) -> int:
        return self.embedding.target_dim


@dataclass(frozen=True)
class AggregatedModel:
    submodels: tuple[Submodel, ...]
    weights: np.ndarray
    eta: float

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float)
        if len(self.submodels) < 1 or w.size != len(self.submodels):
            raise ValueError("need one weight per submodel and at least one submodel")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        w.setflags(write=False)
        object.__setattr__(self, "submodels", tuple(self.submodels))
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.submodels[0].embedding.source_dim

    @property
    def n(self) -> int:
        return sum(s.n_i for s in self.submodels)

    def active(self):
        return [(w, s) for w, s in zip(self.weights, self.submodels) if w > _NEGLIGIBLE_WEIGHT]


def partition(n: int, m: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniformly random split of ``0..n-1`` into ``m`` groups whose sizes differ by at most one."""
    if m < 1 or m > n:
        raise ValueError(f"cannot split {n} points into {m} groups")
    perm = rng.permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, m)]


def model_prior(n_i: int, n: int, d_i: int, d: int, eta: float) -> float:
    """Unnormalised model prior ``(n_i/n)^2 (d_i/d)^eta``."""
    if not (1 <= n_i <= n and 1 <= d_i <= d):
        raise ValueError("need 1 <= n_i <= n and 1 <= d_i <= d")
    return (n_i / n) ** 2 * (d_i / d) ** eta


def bic_log_evidence(max_log_likelihood: float, d_i: int, n_i: int) -> float:
    """BIC approximation with ``d_i + 1`` kernel parameters (lengthscales and process variance)."""
    return max_log_likelihood - 0.5 * (d_i + 1) * math.log(n_i)


def _weights_from_logs(log_evidence: np.ndarray, log_prior: np.ndarray) -> np.ndarray:
    score = np.asarray(log_evidence, dtype=float) + np.asarray(log_prior, dtype=float)
    if not np.any(np.isfinite(score)):
        raise ValueError("every submodel has -inf evidence")
    w = np.exp(score - logsumexp(score))
    return w / w.sum()


def bayes_weights(submodels: Sequence[Submodel], eta: float) -> np.ndarray:
    """Posterior model probabilities, normalised with a log-sum-exp shift."""
    n = sum(s.n_i for s in submodels)
    d = submodels[0].embedding.source_dim
    log_prior = [2.0 * math.log(s.n_i / n) + eta * math.log(s.d_i / d) for s in submodels]
    return _weights_from_logs([s.log_evidence for s in submodels], log_prior)


MIN_SUBSET_SIZE = 3  # smallest subset whose hyperparameters can be estimated


def default_subset_count(n: int) -> int:
    """``ceil(n / 50)`` clamped to ``[2, 10]``, but never so many that a subset drops below three points."""
    return max(1, min(max(math.ceil(n / 50), 2), 10, n // MIN_SUBSET_SIZE))


def default_dim_sampler(d: int, n_i: int, rng: np.random.Generator) -> int:
    """Uniform draw from ``{ceil(d/10), ..., min(ceil(d/2), n_i - 2)}``.

    When the subset is too small for that range the upper end wins, so the
    draw collapses to ``max(1, n_i - 2)``.
    """
    hi = max(1, min(math.ceil(d / 2), n_i - 2))
    lo = min(math.ceil(d / 10), hi)
    return int(rng.integers(lo, hi + 1))


def fixed_dim_sampler(d_e: int) -> DimSampler:
    def sampler(d: int, n_i: int, rng: np.random.Generator) -> int:
        return min(d_e, d)

    return sampler


def scaled_prior(data: ReplicatedDataset) -> MeanPrior:
    """Constant-mean prior centred on the data, ten data standard deviations wide."""
    sd = float(np.std(data.sample_means)) if len(data) > 1 else 0.0
    return MeanPrior.constant(float(np.mean(data.sample_means)), (10.0 * sd) ** 2 if sd > 0 else 100.0)


def _draw_embedding(kind: str, X: np.ndarray, d_i: int, rng: np.random.Generator) -> Embedding:
    d = X.shape[1]
    if kind == "identity":
        return identity_embedding(d)
    if kind == "gaussian":
        return gaussian_embedding(d, d_i, rng)
    if kind == "pca":
        return pca_embedding(X, min(d_i, X.shape[0] - 1, d))
    raise ValueError(f"unknown embedding kind {kind!r}")


def fit_submodel(
    data: ReplicatedDataset,
    indices: np.ndarray,
    embedding: Embedding,
    prior: MeanPrior,
    rng: np.random.Generator,
    kernel: KernelSpec | None = None,
    restarts: int = 2,
    maxiter: int = 60,
) -> Submodel:
    """Fit one GP on the projected subset; estimate its kernel unless one is given."""
    sub = data.subset(indices)
    Z = project(embedding, sub.points)
    projected = sub.with_points(Z)
    if kernel is None:
        fit = estimate_hyperparameters(projected, default_bounds(projected), restarts, rng, prior, maxiter)
        kernel = fit.kernel
    gp = fit_gp(projected, kernel, prior)
    lml = log_marginal_likelihood(gp)
    return Submodel(embedding, np.asarray(indices), gp, bic_log_evidence(lml, embedding.target_dim, len(sub)))


def _fit_all(
    data: ReplicatedDataset,
    m: int,
    dim_sampler: DimSampler,
    rng: np.random.Generator,
    embedding_kind: str,
    prior: MeanPrior,
    kernel: KernelSpec | None,
    restarts: int,
    maxiter: int,
    executor: Executor | None,
) -> list[Submodel]:
    d = data.dim
    groups = partition(len(data), m, rng)
    jobs = []
    for idx in groups:
        d_i = d if embedding_kind == "identity" else dim_sampler(d, idx.size, rng)
        emb = _draw_embedding(embedding_kind, data.points[idx], d_i, rng)
        child = np.random.default_rng(rng.integers(2**63))
        jobs.append((idx, emb, child))

    def run(job):
        idx, emb, child = job
        try:
            return fit_submodel(data, idx, emb, prior, child, kernel, restarts, maxiter)
        except (LinAlgError, ValueError) as exc:
            return exc

    results = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]
    failures = [r for r in results if isinstance(r, Exception)]
    fitted = [r for r in results if not isinstance(r, Exception)]
    if failures:
        if m < 2 or not fitted:
            raise failures[0]
        warnings.warn(f"dropped {len(failures)} of {m} submodels after fit failures: {failures[0]}", RuntimeWarning)
    return fitted


def build_aggregated_model(
    data: ReplicatedDataset,
    m: int | None = None,
    dim_sampler: DimSampler | None = None,
    eta: float = 1.0,
    rng: np.random.Generator | None = None,
    *,
    embedding_kind: str = "gaussian",
    prior: MeanPrior | None = None,
    kernel: KernelSpec | None = None,
    restarts: int = 2,
    maxiter: int = 60,
    executor: Executor | None = None,
) -> AggregatedModel:
    """Partition, embed, fit and weight ``m`` submodels.

    Every call draws a fresh partition and fresh embeddings.  Passing
    ``kernel`` skips hyperparameter estimation and uses it for every submodel.
    Submodel fits may be dispatched through ``executor``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    m = default_subset_count(len(data)) if m is None else m
    prior = prior or scaled_prior(data)
    fitted = _fit_all(
        data, m, dim_sampler or default_dim_sampler, rng, embedding_kind, prior, kernel, restarts, maxiter, executor
    )
    return AggregatedModel(tuple(fitted), bayes_weights(fitted, eta), eta)


def predict_aggregated(model: AggregatedModel, x):
    """Aggregated mean ``sum w_i m_i(Pi_i x)`` and variance ``sum w_i^2 C_i(Pi_i x, Pi_i x)``."""
    if not isinstance(model, AggregatedModel):
        raise TypeError("expected a built AggregatedModel")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    if X.shape[1] != model.dim:
        raise ValueError(f"query dimension {X.shape[1]} does not match model dimension {model.dim}")
    mean = np.zeros(X.shape[0])
    var = np.zeros(X.shape[0])
    for w, sub in model.active():
        mu_i, var_i = posterior_predict(sub.gp, project(sub.embedding, X))
        mean += w * mu_i
        var += w * w * var_i
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def aggregated_cov_matrix(model: AggregatedModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    cov = np.zeros((X.shape[0], X.shape[0]))
    for w, sub in model.active():
        cov += w * w * posterior_cov_matrix(sub.gp, project(sub.embedding, X))
    return cov


def eta_cv_scores(
    data: ReplicatedDataset,
    grid: Sequence[float],
    k: int,
    rng: np.random.Generator,
    **build_kwargs,
) -> np.ndarray:
    """Mean held-out squared error of the aggregated predictor for each ``eta``.

    Submodels do not depend on ``eta``, so each fold is fitted once and only
    the weights are recomputed across the grid.
    """
    if len(grid) < 1:
        raise ValueError("eta grid is empty")
    if k < 2 or len(data) < 2 * k:
        raise ValueError("need k >= 2 folds and at least 2k points")
    folds = np.array_split(rng.permutation(len(data)), k)
    build_kwargs.setdefault("prior", scaled_prior(data))
    errors = np.zeros(len(grid))
    for held in folds:
        train = np.setdiff1d(np.arange(len(data)), held)
        base = build_aggregated_model(data.subset(train), rng=rng, **build_kwargs)
        for j, eta in enumerate(grid):
            model = AggregatedModel(base.submodels, bayes_weights(base.submodels, eta), eta)
            pred, _ = predict_aggregated(model, data.points[held])
            errors[j] += np.sum((pred - data.sample_means[held]) ** 2)
    return errors / len(data)


def select_eta_cv(
    data: ReplicatedDataset,
    grid: Sequence[float],
    k: int,
    rng: np.random.Generator,
    **build_kwargs,
) -> float:
    """Grid value with the lowest k-fold prediction error; ties go to the smaller ``eta``."""
    grid = list(grid)
    if len(grid) == 1:
        return float(grid[0])
    scores = eta_cv_scores(data, grid, k, rng, **build_kwargs)
    best = min(range(len(grid)), key=lambda j: (scores[j], grid[j]))
    return float(grid[best])
