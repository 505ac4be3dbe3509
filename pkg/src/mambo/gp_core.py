"""Stochastic Gaussian-process regression on replicated noisy observations.

The latent objective is modelled as ``F ~ GP(l(x)^T beta, Sigma_F)`` with a
Gaussian prior ``beta ~ N(b, Omega)`` on the linear mean coefficients, and each
design point carries its own plug-in noise variance ``s^2(x_i) / M(x_i)``
(stochastic kriging).  Everything is evaluated through a cached Cholesky factor
of ``Sigma_F + Sigma_xi``.
"""

from __future__ import annotations

import logging
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lapack, solve_triangular
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
NOISE_FLOOR = 1e-6
JITTER = 1e-10
MAX_JITTER = 1e-4
NEGATIVE_VARIANCE_TOL = 1e-8

_clamp_lock = threading.Lock()
_clamp_count = 0


class CovarianceError(LinAlgError):
    """A covariance matrix stayed non positive-definite after jitter escalation."""


class NotFittedError(RuntimeError):
    pass


def negative_variance_clamps() -> int:
    """Number of predictive variances clamped from below ``-1e-8`` so far."""
    return _clamp_count


def _record_clamps(k: int) -> None:
    global _clamp_count
    with _clamp_lock:
        _clamp_count += k


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential (product form) kernel ``s2 * exp(-sum theta_i (x_i - x'_i)^2)``."""

    lengthscale_rates: np.ndarray
    process_variance: float

    def __post_init__(self) -> None:
        theta = np.array(self.lengthscale_rates, dtype=float, ndmin=1)
        if theta.ndim != 1 or theta.size == 0:
            raise ValueError("lengthscale_rates must be a non-empty vector")
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
            raise ValueError("lengthscale_rates must be finite and positive")
        if not np.isfinite(self.process_variance) or self.process_variance <= 0:
            raise ValueError("process_variance must be finite and positive")
        theta.setflags(write=False)
        object.__setattr__(self, "lengthscale_rates", theta)
        object.__setattr__(self, "process_variance", float(self.process_variance))

    @property
    def dim(self) -> int:
        return self.lengthscale_rates.size

    def matrix(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        """Kernel matrix between the rows of ``X1`` and ``X2``."""
        X1 = np.atleast_2d(X1)
        X2 = np.atleast_2d(X2)
        if X1.shape[1] != self.dim or X2.shape[1] != self.dim:
            raise ValueError(
                f"input dimension {X1.shape[1]}/{X2.shape[1]} does not match kernel dimension {self.dim}"
            )
        s = np.sqrt(self.lengthscale_rates)
        A = X1 * s
        B = X2 * s
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        np.maximum(sq, 0.0, out=sq)
        return self.process_variance * np.exp(-sq)


def kernel_eval(kernel: KernelSpec, x, x_prime) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if x.size != kernel.dim or x_prime.size != kernel.dim:
        raise ValueError(
            f"dimension mismatch: got {x.size} and {x_prime.size}, kernel has {kernel.dim}"
        )
    diff = x - x_prime
    return kernel.process_variance * float(np.exp(-np.sum(kernel.lengthscale_rates * diff * diff)))


def _constant_basis(X: np.ndarray) -> np.ndarray:
    return np.ones((np.atleast_2d(X).shape[0], 1))


@dataclass(frozen=True)
class MeanPrior:
    """Linear mean ``l(x)^T beta`` with ``beta ~ N(prior_mean, prior_cov)``.

    ``basis`` maps an ``(n, d)`` array to the ``(n, p)`` matrix whose rows are
    ``l(x_i)``.
    """

    basis: Callable[[np.ndarray], np.ndarray]
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    def __post_init__(self) -> None:
        b = np.atleast_1d(np.asarray(self.prior_mean, dtype=float))
        omega = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
        if omega.shape != (b.size, b.size):
            raise ValueError("prior_cov must be square with the size of prior_mean")
        if not np.allclose(omega, omega.T):
            raise ValueError("prior_cov must be symmetric")
        try:
            chol = cholesky(omega, lower=True)
        except LinAlgError as exc:
            raise ValueError("prior_cov must be positive definite") from exc
        object.__setattr__(self, "prior_mean", b)
        object.__setattr__(self, "prior_cov", omega)
        object.__setattr__(self, "_omega_chol", chol)

    @classmethod
    def constant(cls, mean: float = 0.0, variance: float = 100.0) -> "MeanPrior":
        return cls(_constant_basis, np.array([mean]), np.array([[variance]]))

    @property
    def size(self) -> int:
        return self.prior_mean.size

    def design(self, X: np.ndarray) -> np.ndarray:
        F = np.atleast_2d(np.asarray(self.basis(np.atleast_2d(X)), dtype=float))
        if F.shape[1] != self.size:
            raise ValueError(f"basis returned {F.shape[1]} columns, prior has {self.size}")
        return F

    def precision(self) -> np.ndarray:
        return cho_solve((self._omega_chol, True), np.eye(self.size))

    def log_det(self) -> float:
        return 2.0 * float(np.log(np.diag(self._omega_chol)).sum())


@dataclass(frozen=True)
class ReplicatedDataset:
    """Design points with per-point replicate statistics."""

    points: np.ndarray
    sample_means: np.ndarray
    sample_variances: np.ndarray
    replicate_counts: np.ndarray

    def __post_init__(self) -> None:
        X = np.array(self.points, dtype=float, ndmin=2)
        ybar = np.array(self.sample_means, dtype=float).ravel()
        s2 = np.array(self.sample_variances, dtype=float).ravel()
        counts = np.array(self.replicate_counts).ravel().astype(int)
        n = X.shape[0]
        if not (ybar.size == s2.size == counts.size == n):
            raise ValueError("points, sample_means, sample_variances and replicate_counts differ in length")
        if np.any(s2 < 0):
            raise ValueError("sample_variances must be nonnegative")
        if np.any(counts < 1):
            raise ValueError("replicate_counts must be >= 1")
        if n > 1:
            order = np.lexsort(X.T[::-1])
            if not np.all(np.any(X[order[1:]] != X[order[:-1]], axis=1)):
                raise ValueError("points must be pairwise distinct")
        self._set(X, ybar, s2, counts)

    def _set(self, X, ybar, s2, counts) -> None:
        for name, arr in (("points", X), ("sample_means", ybar), ("sample_variances", s2), ("replicate_counts", counts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_replicates(cls, points, replicates) -> "ReplicatedDataset":
        """Build from a list of per-point replicate arrays."""
        reps = [np.asarray(r, dtype=float).ravel() for r in replicates]
        means = [r.mean() for r in reps]
        variances = [r.var(ddof=1) if r.size > 1 else 0.0 for r in reps]
        return cls(np.asarray(points, dtype=float), means, variances, [r.size for r in reps])

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, indices) -> "ReplicatedDataset":
        idx = np.asarray(indices, dtype=int)
        if np.unique(idx).size != idx.size:
            raise ValueError("subset indices must be distinct")
        # rows of a validated dataset stay valid, so skip re-validation
        out = object.__new__(ReplicatedDataset)
        out._set(self.points[idx], self.sample_means[idx], self.sample_variances[idx], self.replicate_counts[idx])
        return out

    def with_points(self, points: np.ndarray) -> "ReplicatedDataset":
        """Same statistics at new (e.g. projected) locations; only shapes are checked."""
        X = np.array(points, dtype=float, ndmin=2)
        if X.shape[0] != len(self):
            raise ValueError("need one new location per design point")
        out = object.__new__(ReplicatedDataset)
        out._set(X, self.sample_means, self.sample_variances, self.replicate_counts)
        return out

    def noise_variances(self, floor: float = NOISE_FLOOR) -> np.ndarray:
        """Plug-in noise variances ``s^2 / M``.

        Points with a single replicate have no variance estimate; they get the
        average sample variance of the points with two or more replicates, or
        ``floor`` when there are none.
        """
        counts = self.replicate_counts
        s2 = self.sample_variances.astype(float)
        single = counts < 2
        if np.any(single):
            pooled = s2[~single].mean() if np.any(~single) else floor
            s2 = np.where(single, pooled, s2)
        return s2 / counts


def _jittered_cholesky(matrix: np.ndarray, scale: float, name: str, jitter: float = JITTER):
    """Cholesky factor of ``matrix + j * scale * I`` with ``j`` doubled on failure."""
    j = jitter
    diag = np.arange(matrix.shape[0])
    while True:
        work = matrix.copy()
        work[diag, diag] += j * scale
        L, info = lapack.dpotrf(work, lower=1, clean=1)
        if info == 0:
            return L, j
        if info < 0:
            raise ValueError(f"invalid argument {-info} to the Cholesky routine")
        j = 2.0 * j if j > 0 else JITTER
        if j > MAX_JITTER:
            raise CovarianceError(f"{name} is not positive definite even with jitter {MAX_JITTER:g} * {scale:g}")


@dataclass(frozen=True)
class PosteriorGP:
    """A fitted stochastic GP.  Immutable; prediction is read-only."""

    kernel: KernelSpec
    mean_prior: MeanPrior
    data: ReplicatedDataset
    noise_diag: np.ndarray
    chol: np.ndarray
    beta_hat: np.ndarray
    jitter: float
    _cache: dict = field(repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.data.dim


def fit_gp(
    data: ReplicatedDataset,
    kernel: KernelSpec,
    prior: MeanPrior | None = None,
    noise_diag: np.ndarray | None = None,
) -> PosteriorGP:
    """Condition the GP on the sample means of ``data``."""
    if len(data) < 1:
        raise ValueError("need at least one design point")
    if data.dim != kernel.dim:
        raise ValueError(f"data dimension {data.dim} does not match kernel dimension {kernel.dim}")
    prior = prior or MeanPrior.constant()
    X = data.points
    noise = data.noise_variances() if noise_diag is None else np.array(noise_diag, dtype=float).ravel()
    if noise.size != len(data) or np.any(noise < 0):
        raise ValueError("noise_diag must be nonnegative with one entry per point")

    K = kernel.matrix(X, X)
    K[np.diag_indices_from(K)] += noise
    Lk, jit = _jittered_cholesky(K, kernel.process_variance, "Sigma_F + Sigma_xi")

    F = prior.design(X)  # n x p, rows l(x_i)
    KinvF = cho_solve((Lk, True), F, check_finite=False)
    Kinv_y = cho_solve((Lk, True), data.sample_means, check_finite=False)
    omega_inv = prior.precision()
    A = omega_inv + F.T @ KinvF
    A = 0.5 * (A + A.T)
    LA, _ = _jittered_cholesky(A, float(np.trace(A)) / A.shape[0], "Omega^-1 + L K^-1 L^T", jitter=0.0)
    beta = cho_solve((LA, True), omega_inv @ prior.prior_mean + F.T @ Kinv_y)
    alpha = cho_solve((Lk, True), data.sample_means - F @ beta, check_finite=False)

    cache = {"KinvF": KinvF, "LA": LA, "alpha": alpha, "Kinv_y": Kinv_y, "F": F}
    for arr in (Lk, beta, noise, alpha):
        arr.setflags(write=False)
    return PosteriorGP(kernel, prior, data, noise, Lk, beta, jit, cache)


def _as_queries(gp: PosteriorGP, x) -> tuple[np.ndarray, bool]:
    if gp is None or not isinstance(gp, PosteriorGP):
        raise NotFittedError("model has not been fitted")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    Xq = np.atleast_2d(arr)
    if Xq.shape[1] != gp.dim:
        raise ValueError(f"query dimension {Xq.shape[1]} does not match training dimension {gp.dim}")
    return Xq, single


def _clamp(var: np.ndarray) -> np.ndarray:
    bad = var < -NEGATIVE_VARIANCE_TOL
    if np.any(bad):
        k = int(bad.sum())
        _record_clamps(k)
        warnings.warn(f"{k} predictive variance(s) below -{NEGATIVE_VARIANCE_TOL:g} clamped to 0", RuntimeWarning)
    return np.maximum(var, 0.0)


def _predict_terms(gp: PosteriorGP, Xq: np.ndarray):
    c = gp._cache
    Kq = gp.kernel.matrix(Xq, gp.data.points)  # q x n
    Fq = gp.mean_prior.design(Xq)  # q x p
    mean = Fq @ gp.beta_hat + Kq @ c["alpha"]
    V = solve_triangular(gp.chol, Kq.T, lower=True, check_finite=False)  # n x q
    U = Fq.T - c["KinvF"].T @ Kq.T  # p x q
    W = solve_triangular(c["LA"], U, lower=True, check_finite=False)  # p x q
    return mean, V, W


def posterior_predict(gp: PosteriorGP, x):
    """Posterior mean and variance of ``F`` at one point or at the rows of an array."""
    Xq, single = _as_queries(gp, x)
    mean, V, W = _predict_terms(gp, Xq)
    var = gp.kernel.process_variance - (V * V).sum(0) + (W * W).sum(0)
    var = _clamp(var)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def posterior_cov_matrix(gp: PosteriorGP, X1, X2=None) -> np.ndarray:
    """Posterior covariance matrix between the rows of ``X1`` and ``X2``."""
    A, _ = _as_queries(gp, X1)
    _, V1, W1 = _predict_terms(gp, A)
    if X2 is None:
        B, V2, W2 = A, V1, W1
    else:
        B, _ = _as_queries(gp, X2)
        _, V2, W2 = _predict_terms(gp, B)
    return gp.kernel.matrix(A, B) - V1.T @ V2 + W1.T @ W2


def posterior_cov(gp: PosteriorGP, x, x_prime) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if np.array_equal(x, x_prime):
        return posterior_predict(gp, x)[1]
    return float(posterior_cov_matrix(gp, x[None, :], x_prime[None, :])[0, 0])


def log_marginal_likelihood(gp: PosteriorGP) -> float:
    """Log density of the sample means with the mean coefficients integrated out.

    Uses ``Ybar ~ N(L^T b, K + L^T Omega L)`` evaluated through the cached
    factors (Woodbury identity and matrix determinant lemma).
    """
    if not isinstance(gp, PosteriorGP):
        raise NotFittedError("model has not been fitted")
    c = gp._cache
    prior = gp.mean_prior
    n = len(gp.data)
    F = c["F"]
    r = gp.data.sample_means - F @ prior.prior_mean
    Kinv_r = c["Kinv_y"] - c["KinvF"] @ prior.prior_mean
    g = solve_triangular(c["LA"], F.T @ Kinv_r, lower=True)
    quad = float(r @ Kinv_r - g @ g)
    logdet = (
        2.0 * np.log(np.diag(gp.chol)).sum()
        + prior.log_det()
        + 2.0 * np.log(np.diag(c["LA"])).sum()
    )
    value = -0.5 * (quad + logdet + n * LOG_2PI)
    if not np.isfinite(value):
        raise CovarianceError("log marginal likelihood is not finite")
    return float(value)


def loo_standardized_residuals(gp: PosteriorGP) -> np.ndarray:
    """Leave-one-out residuals of the sample means over their predictive sd.

    Closed form ``alpha_i / sqrt([K^-1]_ii)`` with ``beta_hat`` held fixed, so
    no refits are needed.
    """
    if not isinstance(gp, PosteriorGP):
        raise NotFittedError("model has not been fitted")
    Linv = solve_triangular(gp.chol, np.eye(len(gp.data)), lower=True, check_finite=False)
    kinv_diag = np.einsum("ij,ij->j", Linv, Linv)
    return gp._cache["alpha"] / np.sqrt(kinv_diag)


# --- hyperparameter estimation ------------------------------------------------


@dataclass(frozen=True)
class HyperparameterFit:
    kernel: KernelSpec
    log_likelihood: float
    improved: bool  # False when no local search beat its own starting point


def default_bounds(data: ReplicatedDataset) -> np.ndarray:
    """Log-space box for ``(log theta_1..d, log sigma_F^2)`` scaled to the data.

    Rates are centred on ``1 / (d * span_j^2)`` so the starting correlation
    between opposite corners of the data does not vanish as ``d`` grows.
    """
    X = data.points
    span = X.max(0) - X.min(0) if len(data) > 1 else np.ones(data.dim)
    span = np.where(span > 0, span, 1.0)
    var = float(np.var(data.sample_means)) if len(data) > 1 else 1.0
    var = var if var > 0 else 1.0
    centre = 1.0 / (data.dim * span**2)
    lo = np.append(np.log(1e-2 * centre), np.log(var * 1e-3))
    hi = np.append(np.log(1e2 * centre), np.log(var * 1e2))
    return np.column_stack([lo, hi])


class _Objective:
    """Negative log evidence and its gradient in log-parameter space.

    Only the strictly upper pairs ``i < j`` are stored; the squared-distance
    diagonal is zero, so it never enters the gradient.
    """

    def __init__(self, data: ReplicatedDataset, prior: MeanPrior):
        X = data.points
        self.n, self.d = X.shape
        self.iu, self.ju = np.triu_indices(self.n, 1)
        diff = X[self.iu] - X[self.ju]
        self.Dp = np.ascontiguousarray(diff * diff)  # pairs x d
        self.noise = data.noise_variances()
        F = prior.design(X)
        self.base = F @ prior.prior_cov @ F.T + np.diag(self.noise)
        self.r = data.sample_means - F @ prior.prior_mean
        self.diag = np.arange(self.n)

    def __call__(self, phi: np.ndarray):
        theta = np.exp(phi[:-1])
        s2 = float(np.exp(phi[-1]))
        k = s2 * np.exp(-(self.Dp @ theta))
        kdiag = s2 * (1.0 + JITTER)
        C = self.base.copy()
        C[self.iu, self.ju] += k
        C[self.ju, self.iu] += k
        C[self.diag, self.diag] += kdiag
        L, info = lapack.dpotrf(C, lower=1, clean=0)
        if info != 0:
            try:
                L, _ = _jittered_cholesky(C, s2, "evidence covariance", jitter=0.0)
            except CovarianceError:
                return 1e25, np.zeros_like(phi)
        alpha, _ = lapack.dpotrs(L, self.r, lower=1)
        nll = 0.5 * self.r @ alpha + np.log(np.diag(L)).sum() + 0.5 * self.n * LOG_2PI
        Cinv, _ = lapack.dpotri(L, lower=1)  # lower triangle holds the inverse
        w = (alpha[self.iu] * alpha[self.ju] - Cinv[self.ju, self.iu]) * k
        w_diag = (alpha * alpha - np.diag(Cinv)) * kdiag
        grad = np.empty_like(phi)
        grad[:-1] = theta * (w @ self.Dp)
        grad[-1] = -0.5 * (w_diag.sum() + 2.0 * w.sum())
        return float(nll), grad


def estimate_hyperparameters(
    data: ReplicatedDataset,
    bounds: np.ndarray | None = None,
    restarts: int = 3,
    rng: np.random.Generator | None = None,
    prior: MeanPrior | None = None,
    maxiter: int = 60,
) -> HyperparameterFit:
    """Multi-start L-BFGS-B maximisation of the log evidence.

    The first start is the centre of ``bounds``; the others are uniform draws
    from the box.  Deterministic for a seeded ``rng``.
    """
    if len(data) < 3:
        raise ValueError("need at least 3 points to estimate hyperparameters")
    rng = rng if rng is not None else np.random.default_rng(0)
    prior = prior or MeanPrior.constant()
    bounds = default_bounds(data) if bounds is None else np.asarray(bounds, dtype=float)
    if bounds.shape != (data.dim + 1, 2) or not np.all(np.isfinite(bounds)):
        raise ValueError(f"bounds must be a finite ({data.dim + 1}, 2) array")
    objective = _Objective(data, prior)

    starts = [bounds.mean(1)]
    for _ in range(max(restarts, 1) - 1):
        starts.append(rng.uniform(bounds[:, 0], bounds[:, 1]))

    best_phi, best_val, improved = None, np.inf, False
    for phi0 in starts:
        f0, _ = objective(phi0)
        if f0 < best_val:
            best_phi, best_val = phi0, f0
        try:
            res = minimize(
                objective, phi0, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": maxiter},
            )
        except (ValueError, LinAlgError) as exc:  # pragma: no cover - defensive
            logger.debug("hyperparameter restart failed: %s", exc)
            continue
        if np.isfinite(res.fun) and res.fun < f0 - 1e-12:
            improved = True
        if np.isfinite(res.fun) and res.fun < best_val:
            best_phi, best_val = res.x, float(res.fun)
    if not improved:
        logger.warning("hyperparameter search did not improve on any starting point")
    kernel = KernelSpec(np.exp(best_phi[:-1]), float(np.exp(best_phi[-1])))
    return HyperparameterFit(kernel, -best_val, improved)
