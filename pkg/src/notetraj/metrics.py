"""Ranking metrics, patient-level k-fold splits and Student-t confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import InputError


@dataclass
class EvalQuery:
    prediction: Sequence[str]
    target: frozenset[str]

    def __post_init__(self):
        self.target = frozenset(self.target)
        if not self.target:
            raise InputError("target set must be non-empty")
        if len(set(self.prediction)) != len(self.prediction):
            raise InputError("prediction contains duplicates; deduplicate upstream")


def _check(queries: list[EvalQuery], k: int) -> None:
    if not queries:
        raise InputError("empty query list")
    if k < 1:
        raise InputError("K must be >= 1")


# exact rational sums, so results are correctly rounded (e.g. 5/6, not 5/6 - 1ulp)
def _average_precision(prediction: Sequence[str], target: frozenset[str], k: int) -> Fraction:
    hits = 0
    total = Fraction(0)
    for rank, code in enumerate(prediction[:k], start=1):
        if code in target:
            hits += 1
            total += Fraction(hits, rank)
    return total / min(len(target), k)


def _recall(prediction: Sequence[str], target: frozenset[str], k: int) -> Fraction:
    return Fraction(sum(1 for code in prediction[:k] if code in target), len(target))


def average_precision_at_k(prediction: Sequence[str], target: frozenset[str], k: int) -> float:
    return float(_average_precision(prediction, target, k))


def recall_at_k(prediction: Sequence[str], target: frozenset[str], k: int) -> float:
    return float(_recall(prediction, target, k))


def map_at_k(queries: list[EvalQuery], k: int) -> float:
    """Mean over queries of sum_{k'<=K} P(k') rel(k') / min(m, K).

    Ranks past the end of a prediction count as non-relevant.
    """
    _check(queries, k)
    return float(sum(_average_precision(q.prediction, q.target, k) for q in queries) / len(queries))


def mar_at_k(queries: list[EvalQuery], k: int) -> float:
    """Mean over queries of (relevant items in the top K) / m."""
    _check(queries, k)
    return float(sum(_recall(q.prediction, q.target, k) for q in queries) / len(queries))


def kfold_split(patient_ids: Iterable[str], folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Shuffle distinct patient ids with ``seed`` and deal them into near-equal folds."""
    ids = sorted(set(patient_ids))
    if folds < 2:
        raise InputError("cross-validation needs at least 2 folds")
    if len(ids) < folds:
        raise InputError(f"{len(ids)} patients cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    sizes = [len(ids) // folds + (1 if f < len(ids) % folds else 0) for f in range(folds)]
    assignment, start = {}, 0
    for f, size in enumerate(sizes):
        for i in perm[start:start + size]:
            assignment[ids[i]] = f
        start += size
    return assignment


@dataclass(frozen=True)
class Interval:
    low: float
    high: float
    mean: float
    std: float


def confidence_interval(values: Sequence[float], level: float = 0.95) -> Interval:
    """Student-t interval ``mean ± t_{(1+level)/2, n-1} * s / sqrt(n)`` with sample std ``s``."""
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 2:
        raise InputError("confidence interval needs at least 2 values")
    if np.all(x == x[0]):
        v = float(x[0])
        return Interval(v, v, v, 0.0)
    mean = float(x.mean())
    std = float(x.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2, n - 1)) * std / math.sqrt(n)
    return Interval(mean - half, mean + half, mean, std)
