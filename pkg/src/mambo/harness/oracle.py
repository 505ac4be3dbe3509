"""Multistart local search for optimum values that have no closed form, with a small text cache."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .problems import base_function

DEFAULT_STARTS = 100
DEFAULT_SEED = 0


@dataclass(frozen=True)
class OracleResult:
    name: str
    value: float
    x: np.ndarray
    starts: int
    seed: int
    interior: bool


def multistart_minimum(fn, lower, upper, starts: int = DEFAULT_STARTS, seed: int = DEFAULT_SEED):
    """Best L-BFGS-B result over uniform random starts; returns ``(value, x)``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rng = np.random.default_rng(seed)
    bounds = list(zip(lower, upper))
    best_val, best_x = np.inf, None
    for _ in range(starts):
        res = minimize(fn, rng.uniform(lower, upper), method="L-BFGS-B", bounds=bounds)
        if res.fun < best_val:
            best_val, best_x = float(res.fun), res.x
    return best_val, best_x


def _is_interior(x, lower, upper, rel: float = 1e-6) -> bool:
    margin = rel * (upper - lower)
    return bool(np.all(x > lower + margin) and np.all(x < upper - margin))


@functools.lru_cache(maxsize=None)
def compute_oracle(name: str, starts: int = DEFAULT_STARTS, seed: int = DEFAULT_SEED) -> OracleResult:
    base = base_function(name)
    value, x = multistart_minimum(base.fn, base.lower, base.upper, starts, seed)
    return OracleResult(name, value, x, starts, seed, _is_interior(x, base.lower, base.upper))


def _cache_path(cache_dir, name: str) -> Path:
    return Path(cache_dir) / f"{name}_oracle.txt"


def write_oracle(result: OracleResult, cache_dir) -> Path:
    path = _cache_path(cache_dir, result.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"value = {result.value!r}",
        f"x = {';'.join(repr(float(v)) for v in result.x)}",
        f"method = {result.starts}-start L-BFGS-B on the native box",
        f"seed = {result.seed}",
        f"interior = {result.interior}",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_oracle_value(cache_dir, name: str) -> float | None:
    path = _cache_path(cache_dir, name)
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        key, _, val = line.partition("=")
        if key.strip() == "value":
            return float(val)
    raise ValueError(f"{path} has no value line")


def optimum_value(name: str, cache_dir=None) -> float:
    """Known optimum; closed-form constants first, then the cache, then a fresh multistart search."""
    base = base_function(name)
    if base.f_star is not None:
        return base.f_star
    if cache_dir is not None:
        cached = read_oracle_value(cache_dir, name)
        if cached is not None:
            return cached
    return compute_oracle(name).value
