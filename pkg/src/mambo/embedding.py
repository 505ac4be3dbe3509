"""Linear subspace embeddings ``x -> Pi x`` from R^d to R^{d_i}."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

EmbeddingKind = Literal["gaussian", "pca", "identity"]


@dataclass(frozen=True)
class Embedding:
    matrix: np.ndarray
    kind: EmbeddingKind

    def __post_init__(self) -> None:
        P = np.array(self.matrix, dtype=float, ndmin=2)
        if not np.all(np.isfinite(P)):
            raise ValueError("embedding matrix must be finite")
        target, source = P.shape
        if not 1 <= target <= source:
            raise ValueError(f"target dimension {target} must lie in [1, {source}]")
        if self.kind == "identity" and (target != source or not np.array_equal(P, np.eye(source))):
            raise ValueError("identity embedding must be the square identity matrix")
        P.setflags(write=False)
        object.__setattr__(self, "matrix", P)

    @property
    def source_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def target_dim(self) -> int:
        return self.matrix.shape[0]


def identity_embedding(d: int) -> Embedding:
    return Embedding(np.eye(d), "identity")


def gaussian_embedding(d: int, d_i: int, rng: np.random.Generator) -> Embedding:
    """Random matrix with i.i.d. ``N(0, 1/d_i)`` entries, so ``E[Pi^T Pi] = I``."""
    if not 1 <= d_i <= d:
        raise ValueError(f"target dimension {d_i} must lie in [1, {d}]")
    return Embedding(rng.normal(scale=1.0 / np.sqrt(d_i), size=(d_i, d)), "gaussian")


def pca_embedding(X: np.ndarray, d_i: int) -> Embedding:
    """Top ``d_i`` principal directions of the column-centred data as rows.

    Each row is sign-fixed so that its largest-magnitude entry is positive.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA embedding needs at least 2 points")
    if not 1 <= d_i <= min(n, d):
        raise ValueError(f"target dimension {d_i} must lie in [1, {min(n, d)}]")
    Xc = X - X.mean(0)
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = sv.max(initial=0.0) * max(n, d) * np.finfo(float).eps
    rank = int((sv > tol).sum())
    if rank < d_i:
        raise ValueError(f"data rank {rank} is below the requested dimension {d_i}; at most {rank} is achievable")
    rows = Vt[:d_i].copy()
    pivot = np.abs(rows).argmax(1)
    signs = np.sign(rows[np.arange(d_i), pivot])
    return Embedding(rows * signs[:, None], "pca")


def project(e: Embedding, x) -> np.ndarray:
    """Apply the embedding to one point or to the rows of an array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != e.source_dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match embedding source dimension {e.source_dim}")
    if e.kind == "identity":
        return x.copy()
    return x @ e.matrix.T


def is_subspace_embedding(e: Embedding, V: np.ndarray, eps: float) -> tuple[bool, float]:
    """Check ``||V^T Pi^T Pi V - I||_2 <= eps`` for orthonormal columns ``V``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape[0] != e.source_dim:
        raise ValueError("V must have one row per source dimension")
    k = V.shape[1]
    if not np.allclose(V.T @ V, np.eye(k), atol=1e-8, rtol=0.0):
        raise ValueError("V must have orthonormal columns")
    PV = e.matrix @ V
    distortion = float(np.linalg.norm(PV.T @ PV - np.eye(k), 2))
    return distortion <= eps, distortion
