"""Macroreplication runner, the single-embedding baseline, and CSV output."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from ..acquisition import AcquisitionSpec, propose_next
from ..aggregate import AggregatedModel, Submodel, bic_log_evidence, scaled_prior
from ..embedding import gaussian_embedding, identity_embedding, pca_embedding, project
from ..gp_core import default_bounds, estimate_hyperparameters, fit_gp, log_marginal_likelihood
from ..loop import (
    MamboConfig,
    ReplicateStore,
    RunResult,
    TraceRow,
    default_budget,
    incumbent,
    initial_design,
    run_mambo,
)
from .problems import TestProblem, get_problem

logger = logging.getLogger(__name__)

ALGORITHMS = ("mambo", "baseline")
TRACE_COLUMNS = ["iteration", "proposed_x", "sample_mean", "replications_spent", "best_so_far", "simple_regret"]
TIMING_COLUMNS = ["iteration", "elapsed_s", "fit_s"]
SUMMARY_COLUMNS = ["iteration", "mean_regret", "ci_lo", "ci_hi", "q1", "median", "q3"]


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark experiment.  ``iterations`` counts design points, initial design included."""

    problem: str = "branin100"
    algorithm: str = "mambo"
    n0: int = 20
    iterations: int = 220
    macroreplications: int = 10
    seed: int = 0
    out: str | None = None
    total_budget: int | None = None  # None: enough for every search step
    r_min: int = 2
    acquisition: str = "EI"
    kappa: float = 2.0
    candidate_count: int = 512
    refine_steps: int = 20
    m: int | None = None
    target_dim: int | None = None
    embedding_kind: str = "gaussian"
    eta: float | None = None
    eta_grid: tuple[float, ...] = (0.0, 1.0, 2.0)
    cv_folds: int = 4
    s_coeff: float = 5.0
    restarts: int = 2
    maxiter: int = 60
    baseline_embedding: str = "pca"
    baseline_dim: int | None = None  # None: the problem's active dimension
    problem_seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.macroreplications < 1:
            raise ValueError("macroreplications must be >= 1")
        if self.iterations < self.n0:
            raise ValueError("iterations counts all design points and must be >= n0")
        if self.baseline_embedding not in ("pca", "gaussian", "identity"):
            raise ValueError(f"unknown baseline embedding {self.baseline_embedding!r}")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.macroreplications)]

    @property
    def search_steps(self) -> int:
        return self.iterations - self.n0

    def mambo_config(self) -> MamboConfig:
        budget = self.total_budget
        if budget is None:
            budget = default_budget(self.n0, self.search_steps, self.r_min, self.s_coeff)
        return MamboConfig(
            n0=self.n0,
            total_budget=budget,
            r_min=self.r_min,
            acquisition=AcquisitionSpec(self.acquisition, self.kappa, self.candidate_count, self.refine_steps),
            m=self.m,
            target_dim=self.target_dim,
            embedding_kind=self.embedding_kind,
            eta=self.eta,
            eta_grid=tuple(self.eta_grid),
            cv_folds=self.cv_folds,
            s_coeff=self.s_coeff,
            restarts=self.restarts,
            maxiter=self.maxiter,
            max_iterations=self.search_steps,
        )


def single_embedding_baseline(
    problem,
    config: MamboConfig,
    rng: np.random.Generator,
    embedding_kind: str = "pca",
    target_dim: int = 6,
    sink: Callable[[TraceRow], None] | None = None,
) -> RunResult:
    """Plain EI optimisation through one embedding fixed from the initial design.

    A single GP is refitted on the projected data each step; there is no
    aggregation, no re-embedding and no replication beyond ``r_min``.
    """
    lower = np.asarray(problem.lower, dtype=float)
    upper = np.asarray(problem.upper, dtype=float)
    store = ReplicateStore(lower.size)
    trace: list[TraceRow] = []
    t0 = time.perf_counter()
    consumed, best = 0, np.inf
    spec = config.acquisition if config.acquisition.kind == "EI" else AcquisitionSpec(
        "EI", candidate_count=config.acquisition.candidate_count, refine_steps=config.acquisition.refine_steps)

    def emit(x, fit_s):
        nonlocal best
        inc_x, inc_mean = incumbent(store.dataset())
        best = min(best, inc_mean)
        row = TraceRow(len(store.reps), x.copy(), float(store.means[-1]), consumed, best, inc_x,
                       time.perf_counter() - t0, fit_s)
        trace.append(row)
        if sink is not None:
            sink(row)

    for x in initial_design(config.n0, lower, upper, rng):
        store.add_point(x, problem.sample(x, config.r_min, rng))
        consumed += config.r_min
        emit(x, 0.0)

    X0 = store.points.copy()
    if embedding_kind == "identity":
        emb = identity_embedding(lower.size)
    elif embedding_kind == "pca":
        emb = pca_embedding(X0, min(target_dim, X0.shape[0] - 1, lower.size))
    else:
        emb = gaussian_embedding(lower.size, target_dim, rng)

    def fit() -> AggregatedModel:
        data = store.dataset()
        projected = data.with_points(project(emb, data.points))
        prior = scaled_prior(data)
        hp = estimate_hyperparameters(projected, default_bounds(projected), config.restarts, rng, prior,
                                      config.maxiter)
        gp = fit_gp(projected, hp.kernel, prior)
        sub = Submodel(emb, np.arange(len(data)), gp,
                       bic_log_evidence(log_marginal_likelihood(gp), emb.target_dim, len(data)))
        return AggregatedModel((sub,), np.ones(1), 0.0)

    model = fit()
    termination = "iteration_cap"
    for _ in range(config.max_iterations):
        if consumed + config.r_min > config.total_budget:
            termination = "budget_exhausted"
            break
        x = propose_next(model, lower, upper, store.points, spec, float(store.means.min()), rng)
        store.add_point(x, problem.sample(x, config.r_min, rng))
        consumed += config.r_min
        start = time.perf_counter()
        model = fit()
        emit(x, time.perf_counter() - start)

    inc_x, inc_mean = incumbent(store.dataset())
    return RunResult(inc_x, inc_mean, trace, termination, store.dataset(), 0.0, consumed, model)


@dataclass
class MacrorepOutcome:
    seed: int
    regrets: np.ndarray  # one entry per trace row
    result: RunResult | None = None
    error: str | None = None


@dataclass
class Summary:
    iterations: np.ndarray
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    quartiles: tuple[float, float, float]
    outcomes: list[MacrorepOutcome] = field(default_factory=list)

    @property
    def final_regrets(self) -> np.ndarray:
        return np.array([o.regrets[-1] for o in self.outcomes if o.error is None])


def run_single(cfg: ExperimentConfig, seed: int, problem: TestProblem | None = None) -> tuple[RunResult, np.ndarray]:
    """One macroreplication; returns the run and its simple-regret trace."""
    problem = problem or get_problem(cfg.problem, cfg.problem_seed)
    rng = np.random.default_rng(seed)
    mcfg = cfg.mambo_config()
    if cfg.algorithm == "mambo":
        result = run_mambo(problem, mcfg, rng)
    else:
        dim = cfg.baseline_dim or problem.active_dim
        result = single_embedding_baseline(problem, mcfg, rng, cfg.baseline_embedding, dim)
    regrets = np.array([problem.regret(row.incumbent_x) for row in result.trace])
    return result, regrets


def _run_one(args):
    cfg, seed = args
    try:
        result, regrets = run_single(cfg, seed)
        return MacrorepOutcome(seed, regrets, result)
    except Exception as exc:  # a failed macroreplication is reported, not fatal
        logger.exception("macroreplication with seed %d failed", seed)
        return MacrorepOutcome(seed, np.empty(0), None, f"{type(exc).__name__}: {exc}")


def summarise(outcomes: list[MacrorepOutcome], iterations: int) -> Summary:
    """Mean and 95% normal interval per iteration; quartiles of the final regrets."""
    ok = [o for o in outcomes if o.error is None]
    if not ok:
        raise RuntimeError("every macroreplication failed")
    length = min(iterations, min(o.regrets.size for o in ok))
    R = np.vstack([o.regrets[:length] for o in ok])
    mean = R.mean(0)
    half = 1.959963984540054 * R.std(0, ddof=1) / np.sqrt(R.shape[0]) if R.shape[0] > 1 else np.zeros(length)
    q1, med, q3 = np.percentile(R[:, -1], [25, 50, 75])
    return Summary(np.arange(1, length + 1), mean, mean - half, mean + half, (float(q1), float(med), float(q3)),
                   outcomes)


def _fmt(v: float) -> str:
    return repr(float(v))


def output_prefix(cfg: ExperimentConfig) -> str:
    return cfg.problem if cfg.algorithm == "mambo" else f"{cfg.problem}_{cfg.algorithm}"


def write_trace(path: Path, result: RunResult, regrets: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row, reg in zip(result.trace, regrets):
            w.writerow([row.iteration, ";".join(_fmt(v) for v in row.x), _fmt(row.sample_mean), row.replications,
                        _fmt(row.best_so_far), _fmt(reg)])


def write_timing(path: Path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for row in result.trace:
            w.writerow([row.iteration, f"{row.elapsed_s:.6f}", f"{row.fit_s:.6f}"])


def write_summary(path: Path, summary: Summary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        last = len(summary.iterations) - 1
        for j, it in enumerate(summary.iterations):
            q = [_fmt(v) for v in summary.quartiles] if j == last else ["", "", ""]
            w.writerow([int(it), _fmt(summary.mean[j]), _fmt(summary.ci_lo[j]), _fmt(summary.ci_hi[j]), *q])


def run_macroreps(cfg: ExperimentConfig) -> Summary:
    """Run every seed, then write per-seed traces, timings and the summary when ``cfg.out`` is set."""
    seeds = cfg.seeds
    if len(set(seeds)) != len(seeds):
        raise ValueError("macroreplication seeds must be distinct")
    get_problem(cfg.problem, cfg.problem_seed)  # fail fast on an unknown name
    started = datetime.now(timezone.utc)
    jobs = [(cfg, s) for s in seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    failed = [o for o in outcomes if o.error is not None]
    if failed:
        warnings.warn(f"{len(failed)} of {len(outcomes)} macroreplications failed and are excluded: "
                      f"{failed[0].error}", RuntimeWarning)
    summary = summarise(outcomes, cfg.iterations)

    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        prefix = output_prefix(cfg)
        for o in outcomes:
            if o.error is None:
                write_trace(out / f"{prefix}_seed{o.seed}_trace.csv", o.result, o.regrets)
                write_timing(out / f"{prefix}_seed{o.seed}_timing.csv", o.result)
        write_summary(out / f"{prefix}_summary.csv", summary)
        meta = [
            f"started_utc = {started.isoformat()}",
            f"finished_utc = {datetime.now(timezone.utc).isoformat()}",
            f"seeds = {','.join(map(str, seeds))}",
            f"failed = {','.join(str(o.seed) for o in failed)}",
        ]
        (out / f"{prefix}_meta.txt").write_text("\n".join(meta) + "\n")
    return summary
