"""Fast self-checks of the core invariants, run by ``mambo validate``."""

from __future__ import annotations

import numpy as np

from ..acquisition import expected_improvement
from ..aggregate import bayes_weights, build_aggregated_model, fixed_dim_sampler, predict_aggregated
from ..allocation import ocba_split
from ..gp_core import KernelSpec, MeanPrior, ReplicatedDataset, fit_gp, posterior_predict
from .problems import get_problem


def _dataset(rng, n, d) -> ReplicatedDataset:
    X = rng.uniform(size=(n, d))
    reps = [np.sin(3 * x).sum() + 0.1 * rng.standard_normal(4) for x in X]
    return ReplicatedDataset.from_replicates(X, reps)


def _degenerate_aggregation(rng):
    data = _dataset(rng, 30, 3)
    kernel = KernelSpec([2.0, 3.0, 1.0], 1.2)
    prior = MeanPrior.constant(0.0, 10.0)
    model = build_aggregated_model(data, 1, eta=1.0, rng=rng, embedding_kind="identity", kernel=kernel, prior=prior)
    Xq = rng.uniform(size=(50, 3))
    m1, v1 = predict_aggregated(model, Xq)
    m2, v2 = posterior_predict(fit_gp(data, kernel, prior), Xq)
    err = max(np.abs(m1 - m2).max(), np.abs(v1 - v2).max())
    return err <= 1e-10, f"max deviation {err:.2e}"


def _weights(rng):
    data = _dataset(rng, 60, 8)
    model = build_aggregated_model(data, 3, fixed_dim_sampler(4), 1.0, rng, restarts=0)
    w = bayes_weights(model.submodels, 1.0)
    ok = np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    return bool(ok), f"weights {np.round(w, 4).tolist()}"


def _ocba(rng):
    means, sds = rng.normal(size=12), rng.uniform(0.1, 2, 12)
    add = ocba_split(means, sds, 97)
    ok = add.sum() == 97 and np.all(add >= 0)
    return bool(ok), f"allocated {int(add.sum())} of 97"


def _ei(rng):
    mu, var = rng.normal(size=1000), rng.uniform(0, 4, 1000)
    ei = expected_improvement(mu, var, 0.0)
    ok = np.all(ei >= 0) and np.all(ei >= np.maximum(0.0 - mu, 0) - 1e-12)
    return bool(ok), f"min EI {ei.min():.3g}"


def _lift(rng):
    p = get_problem("branin100", seed=int(rng.integers(1000)))
    x = rng.uniform(size=100)
    inactive = np.setdiff1d(np.arange(100), p.active)
    y = x.copy()
    y[inactive] = rng.uniform(size=inactive.size)
    return p.objective(x) == p.objective(y), "inactive coordinates ignored"


CHECKS = [
    ("degenerate aggregation equals a single GP", _degenerate_aggregation),
    ("Bayes weights form a distribution", _weights),
    ("OCBA split conserves the budget", _ocba),
    ("EI is nonnegative and bounds the mean gap", _ei),
    ("lifted objective ignores inactive coordinates", _lift),
]


def run_checks(seed: int = 0):
    """Yield ``(name, passed, detail)`` for every check."""
    rng = np.random.default_rng(seed)
    for name, check in CHECKS:
        try:
            ok, detail = check(rng)
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(ok), detail
