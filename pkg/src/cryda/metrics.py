"""Scalar metrics: ROC AUC, mean with standard error, histograms and W1."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from mid-ranks, which equals the Mann-Whitney pair count
    ``(concordant + ties / 2) / (n_pos * n_neg)``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_stderr(values) -> tuple:
    """Sample mean and standard error (n-1 denominator) of at least two values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2:
        raise ValueError(f"need at least 2 values for a standard error, got {len(v)}")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError("need len(edges) == len(counts) + 1")
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty(self) -> bool:
        return self.total == 0

    @classmethod
    def from_values(cls, values, lo: float = 250.0, hi: float = 1000.0, width: float = 10.0) -> "Histogram":
        edges = lo + width * np.arange(int(round((hi - lo) / width)) + 1)
        v = np.asarray(values, dtype=np.float64)
        v = v[(v >= lo) & (v <= hi)]
        counts, _ = np.histogram(v, bins=edges)
        return cls(edges, counts)

    def to_rows(self) -> list:
        """``(bin_left_edge, count)`` pairs."""
        return [(float(e), int(c)) for e, c in zip(self.edges[:-1], self.counts)]


def wasserstein1d(a: Histogram, b: Histogram) -> float:
    """W1 between normalized histograms on identical edges: sum |CDF_a - CDF_b| * width."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms must share identical bin edges")
    if a.empty or b.empty:
        raise UndefinedMetricError("W1 undefined for an empty histogram")
    ca = np.cumsum(a.counts) / a.total
    cb = np.cumsum(b.counts) / b.total
    return float(np.sum(np.abs(ca - cb) * np.diff(a.edges)))
