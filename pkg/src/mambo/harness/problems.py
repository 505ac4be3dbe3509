"""Synthetic test functions, the price problem, and their high-dimensional lifts.

A lifted problem lives on ``[0, 1]^d``.  Only ``k`` active coordinates matter;
each is mapped affinely onto the native box of the underlying function.  Noise
is Gaussian with sd equal to the Griewank function of the active coordinates
(rescaled to ``[-5, 5]``) divided by ``k``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

NOISE_SD_FLOOR = 1e-6
GRIEWANK_HALF_WIDTH = 5.0

# price-sensitivity constants of the 10-product logit revenue model
PRICE_A = np.array([4.42, 2.06, -5.32, 0.61, -4.41, 1.90, -5.96, -6.41, -1.82, 3.60])
PRICE_B = np.array([0.0010, 0.0024, 0.0023, 0.0057, 0.0065, 0.0021, 0.0080, 0.0056, 0.0064, 0.0087])
PRICE_UPPER = 5000.0

_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H6_A = np.array([
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
])
_H6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])


def branin(u) -> float:
    x1, x2 = u
    b, c, t = 5.1 / (4 * np.pi**2), 5 / np.pi, 1 / (8 * np.pi)
    return float((x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * np.cos(x1) + 10)


def camel(u) -> float:
    """Six-hump camel."""
    x1, x2 = u
    return float((4 - 2.1 * x1**2 + x1**4 / 3) * x1**2 + x1 * x2 + (-4 + 4 * x2**2) * x2**2)


def eggholder(u) -> float:
    x1, x2 = u
    return float(
        -(x2 + 47) * np.sin(np.sqrt(abs(x2 + x1 / 2 + 47)))
        - x1 * np.sin(np.sqrt(abs(x1 - (x2 + 47))))
    )


def hartman6(u) -> float:
    u = np.asarray(u, dtype=float)
    return float(-(_H6_ALPHA * np.exp(-(_H6_A * (u - _H6_P) ** 2).sum(1))).sum())


def price_objective(p) -> float:
    """Negative expected revenue of the multinomial-logit pricing model."""
    p = np.asarray(p, dtype=float)
    e = np.exp(PRICE_A - PRICE_B * p)
    return float(-(p * e).sum() / (1.0 + e.sum()))


def griewank(u) -> float:
    u = np.asarray(u, dtype=float)
    i = np.arange(1, u.size + 1)
    return float(1.0 + (u**2).sum() / 4000.0 - np.prod(np.cos(u / np.sqrt(i))))


@dataclass(frozen=True)
class BaseFunction:
    name: str
    fn: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    f_star: float | None  # None: obtained from the multistart oracle
    x_star: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.lower.size


_BASES = {
    "branin": BaseFunction("branin", branin, np.array([-5.0, 0.0]), np.array([10.0, 15.0]), 0.397887,
                           np.array([np.pi, 2.275])),
    "camel": BaseFunction("camel", camel, np.array([-3.0, -2.0]), np.array([3.0, 2.0]), -1.0316284535,
                          np.array([0.0898, -0.7126])),
    "eggholder": BaseFunction("eggholder", eggholder, np.full(2, -512.0), np.full(2, 512.0), -959.6406627,
                              np.array([512.0, 404.2319])),
    "hartman6": BaseFunction("hartman6", hartman6, np.zeros(6), np.ones(6), None),
    "price": BaseFunction("price", price_objective, np.zeros(10), np.full(10, PRICE_UPPER), None),
}


def base_function(name: str) -> BaseFunction:
    try:
        return _BASES[name]
    except KeyError:
        raise ValueError(f"unknown test function {name!r}; choose from {sorted(_BASES)}") from None


def eval_testfunc(name: str, u) -> float:
    base = base_function(name)
    u = np.asarray(u, dtype=float)
    if u.shape != (base.dim,):
        raise ValueError(f"{name} takes {base.dim} inputs, got shape {u.shape}")
    return base.fn(u)


@dataclass(frozen=True)
class TestProblem:
    """A base function lifted onto ``[0, 1]^d`` with Griewank heteroscedastic noise."""

    __test__ = False  # keep pytest from collecting this class

    name: str
    base: BaseFunction
    ambient_dim: int
    active: np.ndarray  # 0-based indices of the active coordinates
    f_star: float

    def __post_init__(self) -> None:
        act = np.array(self.active, dtype=int)
        if act.size != self.base.dim or np.unique(act).size != act.size:
            raise ValueError("need one distinct active index per native dimension")
        if act.min() < 0 or act.max() >= self.ambient_dim:
            raise ValueError("active indices out of range")
        act.setflags(write=False)
        object.__setattr__(self, "active", act)

    @property
    def dim(self) -> int:
        return self.ambient_dim

    @property
    def active_dim(self) -> int:
        return self.base.dim

    @property
    def lower(self) -> np.ndarray:
        return np.zeros(self.ambient_dim)

    @property
    def upper(self) -> np.ndarray:
        return np.ones(self.ambient_dim)

    def to_native(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.base.lower + x[self.active] * (self.base.upper - self.base.lower)

    def objective(self, x) -> float:
        """Noiseless value at a point of the unit box."""
        return self.base.fn(self.to_native(x))

    def noise_sd(self, x) -> float:
        u = GRIEWANK_HALF_WIDTH * (2.0 * np.asarray(x, dtype=float)[self.active] - 1.0)
        return max(griewank(u) / self.active_dim, NOISE_SD_FLOOR)

    def sample(self, x, reps: int, rng: np.random.Generator) -> np.ndarray:
        return self.objective(x) + self.noise_sd(x) * rng.standard_normal(reps)

    def regret(self, x) -> float:
        return simple_regret(self.objective(x), self.f_star)


def simple_regret(best_observed_f: float, f_star: float) -> float:
    return abs(best_observed_f - f_star)


def lift_to_highdim(
    base: BaseFunction | str,
    d: int,
    assignment: str = "permutation",
    seed: int = 0,
    f_star: float | None = None,
    name: str | None = None,
) -> TestProblem:
    """Embed ``base`` in ``[0, 1]^d``; active coordinates are ``first_k`` or a seeded permutation."""
    base = base_function(base) if isinstance(base, str) else base
    k = base.dim
    if d < k:
        raise ValueError(f"ambient dimension {d} is below the active dimension {k}")
    if assignment == "first_k":
        active = np.arange(k)
    elif assignment == "permutation":
        active = np.random.default_rng(seed).permutation(d)[:k]
    else:
        raise ValueError(f"unknown assignment {assignment!r}")
    if f_star is None:
        f_star = base.f_star
    if f_star is None:
        from .oracle import optimum_value

        f_star = optimum_value(base.name)
    return TestProblem(name or f"{base.name}{d}", base, d, active, float(f_star))


_PROBLEM_NAME = re.compile(r"^(branin|camel|eggholder|hartman6|price)_?(\d+)?$")


def problem_names() -> list[str]:
    return ["branin", "branin100", "camel", "camel100", "eggholder", "eggholder100",
            "hartman6", "hartman6_100", "price10", "price100"]


def get_problem(name: str, seed: int = 0) -> TestProblem:
    """Named problem: ``branin``, ``branin100``, ``hartman6_100``, ``price10``, ``price100`` and so on.

    A bare name (or ``price10``) is the native function rescaled to the unit
    box; a numeric suffix lifts it to that many dimensions with a seeded
    permutation of the active coordinates.
    """
    m = _PROBLEM_NAME.match(name)
    if m is None:
        raise ValueError(f"unknown problem {name!r}; choose from {problem_names()}")
    base = base_function(m.group(1))
    d = int(m.group(2)) if m.group(2) else base.dim
    if d == base.dim:
        return lift_to_highdim(base, d, "first_k", name=name)
    return lift_to_highdim(base, d, "permutation", seed=seed, name=name)
