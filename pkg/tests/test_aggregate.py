import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambo.aggregate import (
    AggregatedModel,
    Submodel,
    aggregated_cov_matrix,
    bayes_weights,
    build_aggregated_model,
    default_dim_sampler,
    default_subset_count,
    eta_cv_scores,
    fixed_dim_sampler,
    model_prior,
    partition,
    predict_aggregated,
    select_eta_cv,
)
from mambo.embedding import gaussian_embedding, identity_embedding, project
from mambo.gp_core import KernelSpec, MeanPrior, ReplicatedDataset, fit_gp, posterior_predict
from oracles import random_dataset


def _stub(n_i, d_i, d, log_evidence, rng):
    emb = gaussian_embedding(d, d_i, rng)
    return Submodel(emb, np.arange(n_i), None, log_evidence)


def test_partition_sizes(rng):
    parts = partition(10, 2, rng)
    assert sorted(len(p) for p in parts) == [5, 5]
    assert sorted(len(p) for p in partition(7, 3, rng)) == [2, 2, 3]
    single = partition(6, 1, rng)
    assert len(single) == 1 and list(single[0]) == list(range(6))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_partition_is_a_partition(n, m, seed):
    m = min(m, n)
    parts = partition(n, m, np.random.default_rng(seed))
    flat = np.concatenate(parts)
    assert sorted(flat) == list(range(n))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1


def test_partition_rejects_too_many_groups(rng):
    with pytest.raises(ValueError):
        partition(3, 4, rng)


def test_model_prior_values():
    assert model_prior(50, 50, 7, 7, 3.3) == 1.0
    p1, p2 = model_prior(80, 100, 5, 10, 1.0), model_prior(20, 100, 5, 10, 1.0)
    assert p1 / (p1 + p2) == pytest.approx(16 / 17)
    assert p2 / (p1 + p2) == pytest.approx(1 / 17)
    assert model_prior(10, 20, 3, 10, 0.0) == model_prior(10, 20, 9, 10, 0.0)


def test_symmetric_submodels_equal_weights(rng):
    subs = [_stub(10, 4, 20, -3.0, rng), _stub(10, 4, 20, -3.0, rng)]
    np.testing.assert_allclose(bayes_weights(subs, 1.5), [0.5, 0.5], atol=1e-15)


def test_weights_shift_invariant(rng):
    subs = [_stub(10, 3, 20, -5.0, rng), _stub(12, 7, 20, -1.0, rng), _stub(8, 5, 20, -9.0, rng)]
    shifted = [Submodel(s.embedding, s.subset_indices, None, s.log_evidence + 1234.5) for s in subs]
    np.testing.assert_allclose(bayes_weights(subs, 2.0), bayes_weights(shifted, 2.0), atol=1e-12)


def test_weights_match_direct_product(rng):
    subs = [_stub(10, 3, 20, -2.0, rng), _stub(12, 7, 20, -1.0, rng), _stub(8, 5, 20, -4.0, rng)]
    eta = 1.7
    raw = [np.exp(s.log_evidence) * model_prior(s.n_i, 30, s.d_i, 20, eta) for s in subs]
    np.testing.assert_allclose(bayes_weights(subs, eta), np.array(raw) / sum(raw), atol=1e-12)


def test_weights_survive_huge_evidence(rng):
    subs = [_stub(10, 3, 20, 5000.0, rng), _stub(10, 3, 20, -5000.0, rng)]
    w = bayes_weights(subs, 1.0)
    assert np.all(np.isfinite(w)) and w[0] == pytest.approx(1.0)


def test_all_minus_inf_evidence_errors(rng):
    subs = [_stub(10, 3, 20, -np.inf, rng), _stub(10, 3, 20, -np.inf, rng)]
    with pytest.raises(ValueError):
        bayes_weights(subs, 1.0)


def test_dim_sampler_range(rng):
    for _ in range(200):
        assert 10 <= default_dim_sampler(100, 50, rng) <= 48
        assert default_dim_sampler(100, 10, rng) == 8
        assert default_dim_sampler(2, 5, rng) == 1
    assert fixed_dim_sampler(6)(100, 20, rng) == 6


def test_single_identity_submodel_equals_direct_gp(rng):
    data = random_dataset(rng, 30, 3)
    kernel = KernelSpec([2.0, 3.0, 1.0], 1.2)
    prior = MeanPrior.constant(0.3, 5.0)
    model = build_aggregated_model(data, 1, eta=1.0, rng=rng, embedding_kind="identity", kernel=kernel, prior=prior)
    gp = fit_gp(data, kernel, prior)
    Xq = rng.uniform(size=(50, 3))
    m1, v1 = predict_aggregated(model, Xq)
    m2, v2 = posterior_predict(gp, Xq)
    np.testing.assert_allclose(m1, m2, atol=1e-10)
    np.testing.assert_allclose(v1, v2, atol=1e-10)


def test_construction_m4(rng):
    data = random_dataset(rng, 200, 5)
    model = build_aggregated_model(data, 4, fixed_dim_sampler(3), 1.0, rng)
    assert [s.n_i for s in model.submodels] == [50, 50, 50, 50]
    assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert all(s.d_i == 3 for s in model.submodels)
    all_idx = np.sort(np.concatenate([s.subset_indices for s in model.submodels]))
    assert list(all_idx) == list(range(200))


def test_submodel_trained_on_projected_subset(rng):
    data = random_dataset(rng, 40, 6)
    model = build_aggregated_model(data, 2, fixed_dim_sampler(2), 1.0, rng)
    for s in model.submodels:
        np.testing.assert_allclose(s.gp.data.points, project(s.embedding, data.points[s.subset_indices]))
        np.testing.assert_allclose(s.gp.data.sample_means, data.sample_means[s.subset_indices])


def test_embeddings_refresh_between_builds(rng):
    data = random_dataset(rng, 40, 6)
    a = build_aggregated_model(data, 2, fixed_dim_sampler(2), 1.0, rng)
    b = build_aggregated_model(data, 2, fixed_dim_sampler(2), 1.0, rng)
    assert not np.array_equal(a.submodels[0].embedding.matrix, b.submodels[0].embedding.matrix)


def test_weighted_average_mean_and_squared_weight_variance(rng):
    data = random_dataset(rng, 20, 2)
    kernel = KernelSpec([1.0, 1.0], 1.0)
    base = build_aggregated_model(data, 2, fixed_dim_sampler(2), 1.0, rng, kernel=kernel)
    x = np.array([0.4, 0.6])
    preds = [posterior_predict(s.gp, project(s.embedding, x)) for s in base.submodels]
    model = AggregatedModel(base.submodels, [0.5, 0.5], 1.0)
    mean, var = predict_aggregated(model, x)
    assert mean == pytest.approx(0.5 * preds[0][0] + 0.5 * preds[1][0], abs=1e-14)
    assert var == pytest.approx(0.25 * preds[0][1] + 0.25 * preds[1][1], abs=1e-14)


def test_equal_variances_halve():
    data = ReplicatedDataset([[0.0], [1.0], [2.0], [3.0]], [0.0, 1.0, 0.0, 1.0], [0.1] * 4, [2] * 4)
    gp = fit_gp(data.subset([0, 1]), KernelSpec([1.0], 1.0))
    sub = Submodel(identity_embedding(1), np.array([0, 1]), gp, 0.0)
    model = AggregatedModel((sub, sub), [0.5, 0.5], 1.0)
    _, v = posterior_predict(gp, [0.5])
    assert predict_aggregated(model, [0.5])[1] == pytest.approx(v / 2, abs=1e-15)


def test_three_submodel_summation_oracle(rng):
    data = random_dataset(rng, 60, 8)
    model = build_aggregated_model(data, 3, fixed_dim_sampler(4), 0.5, rng, restarts=1)
    Xq = rng.uniform(size=(25, 8))
    mean, var = predict_aggregated(model, Xq)
    for q, x in enumerate(Xq):
        em, ev = 0.0, 0.0
        for w, s in zip(model.weights, model.submodels):
            z = s.embedding.matrix @ x
            mi, vi = posterior_predict(s.gp, z)
            em += w * mi
            ev += w**2 * vi
        assert mean[q] == pytest.approx(em, abs=1e-12)
        assert var[q] == pytest.approx(ev, abs=1e-12)


def test_aggregated_cov_diagonal_matches_variance(rng):
    data = random_dataset(rng, 40, 4)
    model = build_aggregated_model(data, 2, fixed_dim_sampler(2), 1.0, rng)
    Xq = rng.uniform(size=(6, 4))
    np.testing.assert_allclose(np.diag(aggregated_cov_matrix(model, Xq)), predict_aggregated(model, Xq)[1], atol=1e-10)


def test_predict_dimension_checked(rng):
    data = random_dataset(rng, 20, 4)
    model = build_aggregated_model(data, 2, fixed_dim_sampler(2), 1.0, rng)
    with pytest.raises(ValueError):
        predict_aggregated(model, np.zeros(3))


def test_failed_submodel_dropped(rng, monkeypatch):
    import mambo.aggregate as agg

    real = agg.fit_submodel
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise np.linalg.LinAlgError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(agg, "fit_submodel", flaky)
    data = random_dataset(rng, 30, 3)
    with pytest.warns(RuntimeWarning, match="dropped 1"):
        model = build_aggregated_model(data, 3, fixed_dim_sampler(2), 1.0, rng)
    assert len(model.submodels) == 2
    assert model.weights.sum() == pytest.approx(1.0)


def test_failed_single_submodel_propagates(rng, monkeypatch):
    import mambo.aggregate as agg

    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("boom")

    monkeypatch.setattr(agg, "fit_submodel", broken)
    with pytest.raises(np.linalg.LinAlgError):
        build_aggregated_model(random_dataset(rng, 10, 2), 1, rng=rng)


def test_eta_cv_singleton_and_determinism():
    data = random_dataset(np.random.default_rng(0), 24, 5)
    assert select_eta_cv(data, [2.5], 3, np.random.default_rng(0)) == 2.5
    a = select_eta_cv(data, [0.0, 1.0, 4.0], 3, np.random.default_rng(4), restarts=1)
    b = select_eta_cv(data, [0.0, 1.0, 4.0], 3, np.random.default_rng(4), restarts=1)
    assert a == b


def test_eta_cv_selects_argmin_score():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(40, 6))
    means = np.sin(2 * X).sum(1)
    data = ReplicatedDataset(X, means, np.full(40, 1e-3), np.full(40, 2))
    grid = [0.0, 2.0, 8.0]
    scores = eta_cv_scores(data, grid, 4, np.random.default_rng(7), restarts=1)
    chosen = select_eta_cv(data, grid, 4, np.random.default_rng(7), restarts=1)
    assert scores[grid.index(chosen)] == scores.min()


def test_eta_cv_validates_folds(rng):
    with pytest.raises(ValueError):
        select_eta_cv(random_dataset(rng, 5, 2), [0.0, 1.0], 3, rng)


def test_predictor_error_shrinks_with_n():
    """Empirical stand-in for the asymptotic predictor bound."""
    d, active = 20, (3, 11)
    test_rng = np.random.default_rng(99)
    Xt = test_rng.uniform(size=(100, d))

    def f(X):
        a, b = X[:, active[0]], X[:, active[1]]
        return np.sin(4 * a) + (b - 0.4) ** 2 * 3

    medians = []
    for n in (50, 100, 200, 400):
        errs = []
        for seed in range(8):
            r = np.random.default_rng(seed)
            X = r.uniform(size=(n, d))
            data = ReplicatedDataset(X, f(X) + r.normal(scale=0.01, size=n), np.full(n, 1e-4), np.full(n, 2))
            model = build_aggregated_model(data, None, fixed_dim_sampler(10), 1.0, r, restarts=1)
            errs.append(np.median(np.abs(predict_aggregated(model, Xt)[0] - f(Xt))))
        medians.append(np.mean(errs))
    inversions = [(a, b) for a, b in zip(medians, medians[1:]) if b > a]
    assert len(inversions) <= 1, medians
    assert all(b <= 1.05 * a for a, b in inversions), medians


def test_aggregation_faster_than_full_gp():
    rng = np.random.default_rng(0)
    n, d = 1000, 10
    X = rng.uniform(size=(n, d))
    data = ReplicatedDataset(X, np.sin(X).sum(1), np.full(n, 0.01), np.full(n, 4))
    kernel = KernelSpec(np.full(d, 0.5), 1.0)
    prior = MeanPrior.constant(0.0, 100.0)

    def best_of(fn, k=7):
        times = []
        for _ in range(k):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    full = best_of(lambda: fit_gp(data, kernel, prior))
    agg = best_of(lambda: build_aggregated_model(
        data, 10, eta=1.0, rng=np.random.default_rng(1), embedding_kind="identity", kernel=kernel, prior=prior))
    assert full / agg >= 5.0, (full, agg)


def test_default_subset_count_keeps_subsets_fittable():
    assert [default_subset_count(n) for n in (3, 5, 6, 20, 100, 101, 220, 1000, 5000)] == [1, 1, 2, 2, 2, 3, 5, 10, 10]
