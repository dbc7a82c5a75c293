import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from notetraj.errors import InputError
from notetraj.metrics import (
    EvalQuery,
    average_precision_at_k,
    confidence_interval,
    kfold_split,
    map_at_k,
    mar_at_k,
    recall_at_k,
)

from oracles import brute_map_at_k, brute_mar_at_k, t_interval


def test_hand_example_map_and_mar():
    q = [EvalQuery(["A", "C", "B"], frozenset({"A", "B"}))]
    assert map_at_k(q, 3) == pytest.approx(5 / 6, abs=1e-15)
    assert mar_at_k(q, 3) == 1.0
    assert mar_at_k(q, 1) == 0.5


def test_perfect_and_disjoint():
    q = [EvalQuery(["c", "a", "b"], frozenset("abc"))]
    assert map_at_k(q, 3) == 1.0
    assert map_at_k([EvalQuery(["x", "y"], frozenset("ab"))], 2) == 0.0


def test_short_prediction_counts_missing_ranks_as_irrelevant():
    assert average_precision_at_k(["a"], frozenset("ab"), 60) == pytest.approx(0.5)
    assert recall_at_k([], frozenset("ab"), 5) == 0.0


def test_errors():
    with pytest.raises(InputError):
        map_at_k([], 3)
    with pytest.raises(InputError):
        mar_at_k([EvalQuery(["a"], frozenset("a"))], 0)
    with pytest.raises(InputError):
        EvalQuery(["a", "a"], frozenset("a"))
    with pytest.raises(InputError):
        EvalQuery(["a"], frozenset())


labels = st.sampled_from([f"c{i}" for i in range(30)])


@st.composite
def queries(draw):
    pred = draw(st.lists(labels, unique=True, max_size=30))
    target = draw(st.sets(labels, min_size=1, max_size=12))
    return EvalQuery(pred, frozenset(target))


@settings(max_examples=200, deadline=None)
@given(st.lists(queries(), min_size=1, max_size=5), st.integers(1, 40))
def test_bounds_and_oracle(qs, k):
    m, r = map_at_k(qs, k), mar_at_k(qs, k)
    assert 0.0 <= m <= 1.0 and 0.0 <= r <= 1.0
    ref_m = np.mean([brute_map_at_k(q.prediction, q.target, k) for q in qs])
    ref_r = np.mean([brute_mar_at_k(q.prediction, q.target, k) for q in qs])
    assert abs(m - ref_m) < 1e-12 and abs(r - ref_r) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(queries(), min_size=1, max_size=5))
def test_mar_non_decreasing_in_k(qs):
    values = [mar_at_k(qs, k) for k in range(1, 35)]
    assert all(a <= b for a, b in zip(values, values[1:]))


@settings(max_examples=100, deadline=None)
@given(st.sets(labels, min_size=1, max_size=10), st.randoms(use_true_random=False))
def test_permutation_of_target_has_full_recall(target, rnd):
    pred = sorted(target)
    rnd.shuffle(pred)
    assert mar_at_k([EvalQuery(pred, frozenset(target))], max(len(target), 10)) == 1.0


def test_kfold_sizes_and_partition():
    ids = [f"p{i}" for i in range(37)]
    split = kfold_split(ids, 5, seed=3)
    sizes = sorted(np.bincount(list(split.values())).tolist(), reverse=True)
    assert sizes == [8, 8, 7, 7, 7]
    assert set(split) == set(ids)
    assert kfold_split(ids, 5, seed=3) == split
    assert sorted(np.bincount(list(kfold_split(ids[:10], 5, 0).values()))) == [2] * 5


def test_kfold_duplicates_are_one_patient():
    split = kfold_split(["a", "b", "a", "c"], 2, seed=0)
    assert set(split) == {"a", "b", "c"}


def test_kfold_errors():
    with pytest.raises(InputError):
        kfold_split(["a", "b"], 3)
    with pytest.raises(InputError):
        kfold_split(["a", "b", "c"], 1)


def test_confidence_interval_two_values():
    ci = confidence_interval([0.0, 1.0])
    assert ci.mean == 0.5
    assert ci.std == pytest.approx(math.sqrt(0.5), abs=1e-12)
    # t(0.975, df=1) = 12.706 from a standard table
    half = 12.706 * math.sqrt(0.5) / math.sqrt(2)
    assert ci.low == pytest.approx(0.5 - half, abs=1e-3)
    assert ci.high == pytest.approx(0.5 + half, abs=1e-3)


def test_confidence_interval_matches_formula():
    vals = [0.31, 0.29, 0.35, 0.30, 0.33]
    # t(0.975, df=4) = 2.7764451051977987
    low, high, mean, std = t_interval(vals, 2.7764451051977987)
    ci = confidence_interval(vals)
    assert abs(ci.low - low) < 1e-9 and abs(ci.high - high) < 1e-9
    assert abs(ci.mean - mean) < 1e-12 and abs(ci.std - std) < 1e-12


def test_confidence_interval_degenerate():
    ci = confidence_interval([0.4, 0.4, 0.4])
    assert ci.low == ci.high == 0.4
    with pytest.raises(InputError):
        confidence_interval([0.4])
