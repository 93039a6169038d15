import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from possmix.core import ClusterIndicators
from possmix.evaluate import (
    STUDY_FIELDS,
    adjusted_rand_index,
    best_alignment,
    indicator_error,
    rows_to_csv,
    run_study,
    summarize,
)
from possmix.gem import FitConfig



def brute_force_ari(a, b):
    """Pair counting over all unordered pairs."""
    n = len(a)
    both = only_a = only_b = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        both += sa and sb
        only_a += sa and not sb
        only_b += sb and not sa
    total = n * (n - 1) / 2
    same_a, same_b = both + only_a, both + only_b
    expected = same_a * same_b / total
    maximum = (same_a + same_b) / 2
    if maximum == expected:
        return 1.0
    return (both - expected) / (maximum - expected)


def test_ari_basic_values():
    assert adjusted_rand_index([1, 1, 2, 2], [1, 1, 2, 2]) == 1.0
    assert adjusted_rand_index([1, 1, 2, 2], [5, 5, 0, 0]) == 1.0
    assert adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(brute_force_ari([1, 1, 2, 2], [1, 2, 1, 2]))
    assert adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(-0.5)


def test_ari_errors():
    with pytest.raises(ValueError):
        adjusted_rand_index([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        adjusted_rand_index([1], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=15))
def test_ari_symmetric_and_matches_pairs(pairs):
    a, b = map(list, zip(*pairs))
    ari = adjusted_rand_index(a, b)
    assert ari == pytest.approx(adjusted_rand_index(b, a), abs=1e-12)
    assert ari == pytest.approx(brute_force_ari(a, b), abs=1e-12)
    relabel = {0: 3, 1: 0, 2: 1, 3: 2}
    assert adjusted_rand_index([relabel[x] for x in a], b) == pytest.approx(ari, abs=1e-12)


def random_indicators(rng, K=3, E=4):
    kappa = rng.uniform(0, 3, size=(K, E))
    return ClusterIndicators(1 + kappa.sum(axis=1), kappa, rng.uniform(2, 20, size=K))


def test_indicator_error_trivial_cases(rng):
    ind = random_indicators(rng)
    assert indicator_error(ind, ind) == (0.0, 0.0, 0.0)
    one = ClusterIndicators(np.array([3.0]), np.array([[2.0]]), np.array([5.0]))
    shifted = ClusterIndicators(np.array([3.1]), np.array([[2.0]]), np.array([5.0]))
    assert indicator_error(shifted, one)[0] == pytest.approx(0.1)
    assert indicator_error(ind.permuted([2, 0, 1]), ind) == (0.0, 0.0, 0.0)


def test_alignment_is_exhaustive_minimum(rng):
    for _ in range(20):
        truth = random_indicators(rng)
        est = random_indicators(rng)
        costs = {}
        for order in itertools.permutations(range(3)):
            e = est.permuted(order)
            costs[order] = sum(np.sum((x - y) ** 2) for x, y in [(e.lam, truth.lam), (e.kappa, truth.kappa), (e.zeta, truth.zeta)])
        best = min(costs, key=costs.get)
        assert costs[best_alignment(est, truth)] == pytest.approx(costs[best])


def test_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        indicator_error(random_indicators(rng, E=3), random_indicators(rng, E=4))


def test_small_study_and_summary():
    cfg = FitConfig(K=3, n_starts=2, n_keep=1, n_long_iters=5)
    rows = run_study(["easy"], [30], 2, cfg, seed=4)
    assert [r["seed"] for r in rows] == [4, 5]
    assert all(-1 <= r["ari"] <= 1 and r["err_lambda"] >= 0 for r in rows)
    summary = summarize(rows)
    assert summary[0]["reps"] == 2
    assert summary[0]["ari_mean"] == pytest.approx(np.mean([r["ari"] for r in rows]))
    text = rows_to_csv(rows, STUDY_FIELDS)
    assert text.splitlines()[0] == ",".join(STUDY_FIELDS)
    assert len(text.splitlines()) == 3
