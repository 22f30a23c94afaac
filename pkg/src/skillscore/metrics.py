"""Rank correlation and relative L2-distance between score vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRS_MIN = 6.0
GRS_MAX = 30.0


class UndefinedCorrelationError(ValueError):
    """Raised when a rank correlation is requested for a constant vector."""


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they span."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=float)
    start = 0
    n = len(x)
    while start < n:
        stop = start + 1
        while stop < n and xs[stop] == xs[start]:
            stop += 1
        # positions start..stop-1 (0-based) -> ranks start+1..stop
        ranks[order[start:stop]] = (start + 1 + stop) / 2.0
        start = stop
    return ranks


def spearman(truth, pred) -> float:
    """Spearman's rho as the Pearson correlation of average ranks.

    Without ties this is identical to ``1 - 6 * sum(d**2) / (n * (n**2 - 1))``.
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ValueError("truth and pred must be 1-D arrays of equal length")
    if len(truth) < 2:
        raise ValueError("rank correlation needs at least two pairs")
    if np.all(truth == truth[0]) or np.all(pred == pred[0]):
        raise UndefinedCorrelationError("rank correlation is undefined for a constant vector")
    rt = average_ranks(truth)
    rp = average_ranks(pred)
    if not (_has_ties(rt) or _has_ties(rp)):
        # integer numerator and denominator, one rounding
        n = len(rt)
        d2 = int(np.sum((rt - rp) ** 2))
        denom = n * (n * n - 1)
        return (denom - 6 * d2) / denom
    rt -= rt.mean()
    rp -= rp.mean()
    rho = float(np.dot(rt, rp) / np.sqrt(np.dot(rt, rt) * np.dot(rp, rp)))
    return min(1.0, max(-1.0, rho))


def _has_ties(ranks: np.ndarray) -> bool:
    return len(np.unique(ranks)) != len(ranks)


def r_l2(truth, pred, s_min: float = GRS_MIN, s_max: float = GRS_MAX) -> float:
    """Mean squared error normalised by the squared score range (not x100)."""
    if not s_max > s_min:
        raise ValueError(f"score range must satisfy s_max > s_min, got [{s_min}, {s_max}]")
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape or truth.ndim != 1 or len(truth) == 0:
        raise ValueError("truth and pred must be non-empty 1-D arrays of equal length")
    rel = np.abs(truth - pred) / (s_max - s_min)
    return float(np.mean(rel ** 2))


@dataclass(frozen=True)
class ScorePairSet:
    truth: np.ndarray
    pred: np.ndarray
    s_min: float = GRS_MIN
    s_max: float = GRS_MAX

    @classmethod
    def from_pairs(cls, pairs, s_min: float = GRS_MIN, s_max: float = GRS_MAX) -> "ScorePairSet":
        arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1], s_min, s_max)

    def __len__(self) -> int:
        return len(self.truth)

    def spearman(self) -> float:
        return spearman(self.truth, self.pred)

    def r_l2(self) -> float:
        return r_l2(self.truth, self.pred, self.s_min, self.s_max)
