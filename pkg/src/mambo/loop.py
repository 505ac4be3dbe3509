"""The MamBO driver: initial design, then search, allocation and model rebuild until the budget runs out."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import LinAlgError
from scipy.spatial.distance import pdist
from scipy.stats import qmc

from .acquisition import AcquisitionSpec, propose_next
from .aggregate import (
    AggregatedModel,
    build_aggregated_model,
    fixed_dim_sampler,
    scaled_prior,
    select_eta_cv,
)
from .allocation import DEFAULT_S_COEFF, BudgetState, allocate, ocba_split, s_sequence
from .gp_core import ReplicatedDataset, loo_standardized_residuals

logger = logging.getLogger(__name__)

LOO_THRESHOLD = 3.0
LOO_MAX_FRACTION = 0.10


class Problem(Protocol):
    lower: np.ndarray
    upper: np.ndarray

    def sample(self, x: np.ndarray, reps: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class NoisyProblem:
    """Objective plus additive Gaussian noise with a point-dependent sd."""

    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    noise_sd: Callable[[np.ndarray], float] | float = 0.0

    def __post_init__(self) -> None:
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape or not np.all(hi > lo):
            raise ValueError("need lower < upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def sample(self, x: np.ndarray, reps: int, rng: np.random.Generator) -> np.ndarray:
        sd = self.noise_sd(x) if callable(self.noise_sd) else self.noise_sd
        return self.objective(x) + sd * rng.standard_normal(reps)


@dataclass(frozen=True)
class MamboConfig:
    n0: int = 20
    total_budget: int = 10_000
    r_min: int = 2
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    m: int | None = None
    target_dim: int | None = None  # None: uniform draw per submodel
    embedding_kind: str = "gaussian"
    eta: float | None = None  # None: chosen by cross-validation over eta_grid
    eta_grid: tuple[float, ...] = (0.0, 1.0, 2.0)
    cv_folds: int = 4
    s_coeff: float = DEFAULT_S_COEFF
    restarts: int = 2
    maxiter: int = 60
    max_iterations: int = 10_000
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.n0 < 2:
            raise ValueError("n0 must be at least 2")
        if self.r_min < 2:
            raise ValueError("r_min must be at least 2")
        if self.total_budget < self.n0 * self.r_min:
            raise ValueError(f"total_budget {self.total_budget} is below n0 * r_min = {self.n0 * self.r_min}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")


@dataclass(frozen=True)
class TraceRow:
    iteration: int  # number of design points so far
    x: np.ndarray
    sample_mean: float
    replications: int  # cumulative
    best_so_far: float
    incumbent_x: np.ndarray
    elapsed_s: float
    fit_s: float


@dataclass
class RunResult:
    incumbent_x: np.ndarray
    incumbent_mean: float
    trace: list[TraceRow]
    termination: str
    data: ReplicatedDataset
    eta: float
    budget_consumed: int
    model: AggregatedModel | None = None  # the last model built


def initial_design(n0: int, lower, upper, rng: np.random.Generator, tries: int = 10) -> np.ndarray:
    """Best of ``tries`` Latin hypercubes by minimum pairwise distance."""
    if n0 < 2:
        raise ValueError("n0 must be at least 2")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    best, best_gap = None, -np.inf
    for _ in range(tries):
        U = sampler.random(n0)
        gap = pdist(U).min()
        if gap > best_gap:
            best, best_gap = U, gap
    return lower + best * (upper - lower)


def incumbent(data: ReplicatedDataset) -> tuple[np.ndarray, float]:
    """Lowest sample mean; ties go to more replicates, then the earlier point."""
    if len(data) == 0:
        raise ValueError("no sampled points")
    n = len(data)
    j = int(np.lexsort((np.arange(n), -data.replicate_counts, data.sample_means))[0])
    return data.points[j].copy(), float(data.sample_means[j])


class ReplicateStore:
    """Per-point replicate arrays; owned by the driver thread."""

    def __init__(self, dim: int):
        self.points = np.empty((0, dim))
        self.reps: list[np.ndarray] = []
        self.means = np.empty(0)
        self.vars = np.empty(0)
        self.counts = np.empty(0, dtype=np.int64)

    def add_point(self, x: np.ndarray, y: np.ndarray) -> None:
        self.points = np.vstack([self.points, x])
        self.reps.append(np.asarray(y, dtype=float))
        self.means = np.append(self.means, 0.0)
        self.vars = np.append(self.vars, 0.0)
        self.counts = np.append(self.counts, 0)
        self._refresh(len(self.reps) - 1)

    def add_reps(self, j: int, y: np.ndarray) -> None:
        self.reps[j] = np.concatenate([self.reps[j], y])
        self._refresh(j)

    def _refresh(self, j: int) -> None:
        r = self.reps[j]
        self.means[j] = r.mean()
        self.vars[j] = r.var(ddof=1) if r.size > 1 else 0.0
        self.counts[j] = r.size

    def dataset(self) -> ReplicatedDataset:
        return ReplicatedDataset(self.points, self.means, self.vars, self.counts)


def loo_invalid_fraction(model: AggregatedModel) -> float:
    z = np.concatenate([loo_standardized_residuals(s.gp) for s in model.submodels])
    return float(np.mean(np.abs(z) > LOO_THRESHOLD))


class _Builder:
    def __init__(self, config: MamboConfig):
        self.config = config
        self.dim_sampler = None if config.target_dim is None else fixed_dim_sampler(config.target_dim)

    def kwargs(self, restarts: int | None = None) -> dict:
        c = self.config
        return dict(
            m=c.m,
            dim_sampler=self.dim_sampler,
            embedding_kind=c.embedding_kind,
            restarts=c.restarts if restarts is None else restarts,
            maxiter=c.maxiter,
        )

    def build(self, data: ReplicatedDataset, eta: float, rng: np.random.Generator, restarts: int | None = None):
        kw = self.kwargs(restarts)
        m = kw.pop("m")
        if m is not None:
            m = min(m, len(data))
        try:
            return build_aggregated_model(data, m, eta=eta, rng=rng, prior=scaled_prior(data), **kw)
        except (LinAlgError, ValueError) as exc:
            logger.warning("model build failed (%s); retrying with a fresh partition", exc)
            retry = np.random.default_rng(rng.integers(2**63))
            return build_aggregated_model(data, m, eta=eta, rng=retry, prior=scaled_prior(data), **kw)


def _select_eta(config: MamboConfig, data: ReplicatedDataset, builder: _Builder, rng) -> float:
    if config.eta is not None:
        return float(config.eta)
    grid = list(config.eta_grid)
    if len(grid) == 1 or len(data) < 2 * config.cv_folds:
        return float(grid[0]) if len(grid) == 1 else 1.0
    kw = builder.kwargs()
    if kw["m"] is not None:
        kw["m"] = min(kw["m"], len(data) - len(data) // config.cv_folds - 1)
    return select_eta_cv(data, grid, config.cv_folds, rng, **kw)


def run_mambo(
    problem: Problem,
    config: MamboConfig,
    rng: np.random.Generator | None = None,
    sink: Callable[[TraceRow], None] | None = None,
) -> RunResult:
    """Run the optimiser until the replication budget or the iteration cap is exhausted.

    Every trace row is also passed to ``sink`` as soon as it is produced.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    lower = np.asarray(problem.lower, dtype=float)
    upper = np.asarray(problem.upper, dtype=float)
    budget = BudgetState(config.total_budget, config.r_min, config.s_coeff)
    store = ReplicateStore(lower.size)
    trace: list[TraceRow] = []
    t0 = time.perf_counter()
    best = np.inf

    def emit(x, fit_s):
        nonlocal best
        data = store.dataset()
        inc_x, inc_mean = incumbent(data)
        best = min(best, inc_mean)
        j = len(store.reps) - 1
        row = TraceRow(len(data), x.copy(), float(store.means[j]), budget.consumed, best, inc_x,
                       time.perf_counter() - t0, fit_s)
        trace.append(row)
        if sink is not None:
            sink(row)

    for x in initial_design(config.n0, lower, upper, rng):
        store.add_point(x, problem.sample(x, config.r_min, rng))
        budget.spend(config.r_min)
    for i in range(config.n0 - 1):
        # rows for the initial design report the incumbent among the first i+1 points
        sub = ReplicatedDataset(store.points[: i + 1], store.means[: i + 1], store.vars[: i + 1], store.counts[: i + 1])
        inc_x, inc_mean = incumbent(sub)
        best = min(best, inc_mean)
        row = TraceRow(i + 1, store.points[i].copy(), float(store.means[i]), (i + 1) * config.r_min, best, inc_x,
                       time.perf_counter() - t0, 0.0)
        trace.append(row)
        if sink is not None:
            sink(row)

    builder = _Builder(config)
    data = store.dataset()
    eta = 1.0
    model = None
    termination = "budget_exhausted"
    fit_s = 0.0
    if budget.remaining >= config.r_min and config.max_iterations > 0:
        try:
            eta = _select_eta(config, data, builder, rng)
            fit_start = time.perf_counter()
            model = builder.build(data, eta, rng)
            fit_s = time.perf_counter() - fit_start
            if loo_invalid_fraction(model) > LOO_MAX_FRACTION:
                warnings.warn("initial model fails leave-one-out screening; refitting with doubled restarts",
                              RuntimeWarning)
                model = builder.build(data, eta, rng, restarts=2 * config.restarts)
        except (LinAlgError, ValueError) as exc:
            logger.error("initial model build failed: %s", exc)
            termination = "model_failure"
    # fit_s covers the model build only, not the eta search or a screening refit
    emit(store.points[-1], fit_s)

    iterations = 0
    while model is not None:
        if budget.remaining < config.r_min:
            termination = "budget_exhausted"
            break
        if iterations >= config.max_iterations:
            termination = "iteration_cap"
            break
        T = float(store.means.min())
        x = propose_next(model, lower, upper, store.points, config.acquisition, T, rng)
        store.add_point(x, problem.sample(x, config.r_min, rng))
        budget.spend(config.r_min)

        s_N = budget.floor(len(store.reps))
        extra = allocate(store.means, np.sqrt(store.vars), store.counts, s_N, budget.remaining)
        for j in np.flatnonzero(extra):
            store.add_reps(j, problem.sample(store.points[j], int(extra[j]), rng))
        budget.spend(int(extra.sum()))
        iterations += 1

        fit_start = time.perf_counter()
        try:
            model = builder.build(store.dataset(), eta, rng)
        except (LinAlgError, ValueError) as exc:
            logger.error("model rebuild failed twice, stopping: %s", exc)
            termination = "model_failure"
            model = None
        emit(x, time.perf_counter() - fit_start)

    if termination == "budget_exhausted" and 0 < budget.remaining < config.r_min:
        # too little left for a new point; spend the remainder on the sampled ones
        if len(store.reps) > 1:
            extra = ocba_split(store.means, np.sqrt(store.vars), budget.remaining)
        else:
            extra = np.array([budget.remaining])
        for j in np.flatnonzero(extra):
            store.add_reps(j, problem.sample(store.points[j], int(extra[j]), rng))
        budget.spend(int(extra.sum()))

    data = store.dataset()
    inc_x, inc_mean = incumbent(data)
    return RunResult(inc_x, inc_mean, trace, termination, data, eta, budget.consumed, model)


def default_budget(n0: int, iterations: int, r_min: int = 2, s_coeff: float = DEFAULT_S_COEFF) -> int:
    """Replications sufficient for ``iterations`` search steps with every floor met."""
    n = n0 + iterations
    return n0 * r_min + iterations * r_min + n * s_sequence(n, s_coeff, r_min)
