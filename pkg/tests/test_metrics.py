import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_spearman, direct_r_l2
from skillscore.metrics import (ScorePairSet, UndefinedCorrelationError, average_ranks, r_l2,
                                spearman)


def test_spearman_perfect_and_reversed():
    x = [6, 10, 14, 22, 30]
    assert spearman(x, x) == 1.0
    assert spearman(x, x[::-1]) == -1.0


def test_spearman_hand_value():
    # 1 - 6 * (0 + 0 + 1 + 1) / (4 * 15)
    assert spearman([1, 2, 3, 4], [1, 2, 4, 3]) == 0.8


@pytest.mark.parametrize("n", range(2, 7))
def test_spearman_all_permutations_exact(n):
    base = list(range(n))
    for perm in itertools.permutations(base):
        assert spearman(base, list(perm)) == brute_spearman(base, list(perm))


def test_spearman_random_vectors_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 9))
        # coarse rounding forces ties regularly
        t = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        p = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        if len(set(t)) == 1 or len(set(p)) == 1:
            continue
        assert abs(spearman(t, p) - brute_spearman(list(t), list(p))) <= 1e-12


def test_average_ranks_ties():
    np.testing.assert_array_equal(average_ranks([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


def test_spearman_degenerate_raises():
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 2, 3], [4, 4, 4])
    with pytest.raises(ValueError):
        spearman([1], [1])


ints = st.integers(-1000, 1000)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(ints, ints), min_size=2, max_size=10))
def test_spearman_invariant_under_monotone_transform(pairs):
    # integer inputs keep the transforms exact and strictly increasing in floats
    t = np.array([a for a, _ in pairs], dtype=float)
    p = np.array([b for _, b in pairs], dtype=float)
    if len(set(t)) == 1 or len(set(p)) == 1:
        return
    rho = spearman(t, p)
    assert -1.0 <= rho <= 1.0
    assert spearman(t ** 3 + 2 * t, p) == pytest.approx(rho, abs=1e-12)
    assert spearman(t, 3 * p - 7) == pytest.approx(rho, abs=1e-12)


def test_r_l2_values():
    assert r_l2([10, 20], [10, 20]) == 0.0
    assert r_l2([6], [30], 6, 30) == 1.0
    assert 100 * r_l2([6, 30], [12, 30], 6, 30) == 3.125


def test_r_l2_bad_range():
    with pytest.raises(ValueError):
        r_l2([1], [2], 5, 5)


def test_r_l2_matches_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(1, 20))
        lo = float(rng.uniform(-10, 10))
        hi = lo + float(rng.uniform(0.5, 30))
        t = rng.uniform(lo, hi, k)
        p = rng.uniform(lo - 5, hi + 5, k)
        assert abs(r_l2(t, p, lo, hi) - direct_r_l2(t, p, lo, hi)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(6, 30), st.floats(0, 40)), min_size=1, max_size=10),
       st.floats(-50, 50), st.floats(0.1, 5))
def test_r_l2_shift_and_scale(pairs, shift, c):
    t = np.array([a for a, _ in pairs])
    p = np.array([b for _, b in pairs])
    base = r_l2(t, p, 6, 30)
    assert base >= 0
    assert r_l2(t + shift, p + shift, 6 + shift, 30 + shift) == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert r_l2(t, t + c * (p - t), 6, 30) == pytest.approx(c * c * base, rel=1e-9, abs=1e-12)
    assert (base == 0) == bool(np.all(t == p))


def test_score_pair_set():
    s = ScorePairSet.from_pairs([(6, 12), (30, 30)])
    assert len(s) == 2
    assert 100 * s.r_l2() == 3.125
    assert s.spearman() == 1.0
