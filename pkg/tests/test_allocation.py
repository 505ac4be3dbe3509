import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambo.allocation import (
    BudgetState,
    allocate,
    largest_remainder,
    ocba_split,
    ocba_targets,
    s_sequence,
    stage_budget,
)


def ocba_oracle(means, sds, B):
    """Direct solve of the ratio equations with scalar loops (needs distinct means, positive sds)."""
    k = len(means)
    b = min(range(k), key=lambda i: means[i])
    r = [0.0] * k
    for i in range(k):
        if i != b:
            r[i] = (sds[i] / (means[i] - means[b])) ** 2
    acc = 0.0
    for i in range(k):
        if i != b:
            acc += r[i] ** 2 / sds[i] ** 2
    r[b] = sds[b] * math.sqrt(acc)
    alpha = B / sum(r)
    return [alpha * v for v in r]


def ratio_residuals(N, means, sds):
    b = int(np.argmin(means))
    d = np.abs(np.asarray(means) - means[b])
    res = []
    idx = [i for i in range(len(N)) if i != b]
    for i in idx:
        for j in idx:
            lhs = N[i] / N[j]
            rhs = ((sds[i] / d[i]) / (sds[j] / d[j])) ** 2
            res.append(abs(lhs - rhs) / max(1.0, abs(rhs)))
    eq10 = sds[b] * math.sqrt(sum(N[i] ** 2 / sds[i] ** 2 for i in idx))
    res.append(abs(N[b] - eq10) / max(1.0, abs(eq10)))
    return max(res)


def test_s_sequence_examples():
    assert s_sequence(1, 5.0) == 3
    assert s_sequence(1, 0.1, r_min=2) == 2
    assert s_sequence(1, 5.0, r_min=7) == 7


def test_s_sequence_monotone():
    vals = [s_sequence(i, 5.0) for i in range(1, 10_001)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] > vals[0]


def test_s_sequence_rejects_bad_args():
    with pytest.raises(ValueError):
        s_sequence(0, 5.0)
    with pytest.raises(ValueError):
        s_sequence(3, 0.0)


def test_s_sequence_tail_sum_converges():
    # With c=5, a=0.01 the terms i*exp(-a s_i) peak near i=2e4 and fall below 1e-9
    # only around ln i = 41, so the tail is bounded block-wise in log space:
    # [e^t, e^(t+h)] holds at most (e^h - 1) e^t + 1 integers, each term at most
    # e^(t+h) * exp(-a * c * t^2).
    a, c, h = 0.01, 5.0, 0.05
    t = np.arange(0.0, 400.0, h)
    log_block = np.log(np.expm1(h) * np.exp(t) + 1.0) + (t + h) - a * c * t**2
    block = np.exp(log_block)
    tails = np.cumsum(block[::-1])[::-1]
    assert np.isfinite(tails[0])
    assert tails[int(60 / h)] < 1e-9
    # the bound uses s_i >= c ln(i+1)^2, which the implementation meets exactly
    i = np.arange(1, 1_000_001)
    s = np.array([s_sequence(int(k), c) for k in i[:: 10_000]])
    np.testing.assert_array_equal(s, np.maximum(2, np.ceil(c * np.log(i[:: 10_000] + 1.0) ** 2)))


def test_stage_budget_examples():
    assert stage_budget([6, 7, 9], 5, 100) == 0
    assert stage_budget([2, 2, 2], 5, 100) == 9
    assert stage_budget([2, 2, 2], 5, 4) == 4
    assert stage_budget([2, 2, 2], 5, 0) == 0


def test_ocba_zero_budget():
    np.testing.assert_array_equal(ocba_split([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], 0), [0, 0, 0])


def test_ocba_symmetric_non_best():
    alloc = ocba_split([0.0, 1.0, -1.0 + 2.0], [1.0, 2.0, 2.0], 31)
    assert alloc.sum() == 31
    assert abs(alloc[1] - alloc[2]) <= 1


def test_ocba_four_point_oracle():
    means = [1.0, 0.2, 0.9, 2.5]
    sds = [0.5, 0.3, 1.2, 0.8]
    np.testing.assert_allclose(ocba_targets(means, sds, 40), ocba_oracle(means, sds, 40), rtol=1e-12, atol=1e-9)


def test_ocba_ties_regularised():
    t = ocba_targets([1.0, 1.0, 2.0], [1.0, 1.0, 1.0], 10)
    assert np.all(np.isfinite(t)) and t.sum() == pytest.approx(10.0)
    # the tied point is essentially indistinguishable from the best and soaks up the budget
    assert t[1] > t[2]


def test_ocba_all_sds_zero_equal_split():
    np.testing.assert_array_equal(ocba_split([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], 9), [3, 3, 3])


def test_ocba_rejects_single_point():
    with pytest.raises(ValueError):
        ocba_targets([1.0], [1.0], 3)


def test_largest_remainder_exact():
    np.testing.assert_array_equal(largest_remainder([0.5, 0.5, 1.0], 2), [1, 0, 1])
    np.testing.assert_array_equal(largest_remainder([2.2, 0.3, 1.5], 4), [2, 0, 2])


def test_allocate_fills_floor_when_budget_suffices():
    counts = np.array([2, 5, 9])
    extra = allocate([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], counts, 6, 1000)
    np.testing.assert_array_equal(extra, [4, 1, 0])
    assert np.all(counts + extra >= 6)


def test_allocate_capped_uses_ocba_and_conserves():
    extra = allocate([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], [2, 2, 2], 6, 5)
    assert extra.sum() == 5 and np.all(extra >= 0)


def test_budget_state_accounting():
    bs = BudgetState(100, r_min=2)
    bs.spend(30)
    assert bs.consumed + bs.remaining == 100
    with pytest.raises(ValueError):
        bs.spend(71)
    with pytest.raises(ValueError):
        BudgetState(10, r_min=1)
    assert bs.floor(1) == 3


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=12, unique=True),
    st.integers(0, 500),
    st.integers(0, 2**32 - 1),
)
def test_ocba_conserves_and_satisfies_ratios(means, B, seed):
    means = np.asarray(means)
    if np.min(np.abs(means[:, None] - means[None, :]) + np.eye(means.size) * 1e9) < 1e-3:
        return
    sds = np.random.default_rng(seed).uniform(0.1, 5.0, means.size)
    alloc = ocba_split(means, sds, B)
    assert alloc.sum() == B and np.all(alloc >= 0)
    if B > 0:
        assert ratio_residuals(ocba_targets(means, sds, B), means, sds) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=20), st.integers(1, 60), st.integers(0, 400))
def test_stage_budget_bounds(counts, s_N, A):
    B = stage_budget(counts, s_N, A)
    assert 0 <= B <= A
    assert B <= sum(max(0, s_N - c) for c in counts)
