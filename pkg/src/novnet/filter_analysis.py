"""Sign analysis of final-layer weights.

A filter (a column of the known head's weight matrix) is positive for a
class when its weight is strictly positive, negative when strictly
negative; exact zeros belong to neither set. Filters negative for every
known class are globally negative: their activation is evidence that an
input belongs to none of the known classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class FilterReport:
    positive: list[list[int]]  # per class, sorted filter indices
    negative: list[list[int]]
    globally_negative: list[int]
    weights: np.ndarray  # [c, k]

    def to_json_dict(self) -> dict:
        return {
            "classes": [
                {"positive": self.positive[i], "negative": self.negative[i]}
                for i in range(len(self.positive))
            ],
            "globally_negative": self.globally_negative,
            "weights": self.weights.tolist(),
        }


def _check_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ConfigError(f"weight matrix must be rank-2 [c, k], got rank {w.ndim}")
    if not np.all(np.isfinite(w)):
        raise ConfigError("weight matrix contains non-finite values")
    return w


def classify_filters(w: np.ndarray, class_index: int) -> tuple[set[int], set[int]]:
    """Positive and negative filter index sets for one class row."""
    w = _check_weights(w)
    if not 0 <= class_index < w.shape[0]:
        raise IndexError(f"class index {class_index} outside [0, {w.shape[0]})")
    row = w[class_index]
    positive = set(np.flatnonzero(row > 0).tolist())
    negative = set(np.flatnonzero(row < 0).tolist())
    return positive, negative


def globally_negative_filters(w: np.ndarray) -> set[int]:
    """Filters whose weight is strictly negative for every class."""
    w = _check_weights(w)
    if w.shape[0] < 1:
        raise ConfigError("weight matrix needs at least one class row")
    return set(np.flatnonzero(np.all(w < 0, axis=0)).tolist())


def top_filters(w: np.ndarray, class_index: int, k_top: int, sign: str) -> list[int]:
    """Indices of the k_top largest (sign='positive') or smallest
    (sign='negative') weights for a class, ties broken by lower index."""
    w = _check_weights(w)
    if not 0 <= class_index < w.shape[0]:
        raise IndexError(f"class index {class_index} outside [0, {w.shape[0]})")
    k = w.shape[1]
    if not 1 <= k_top <= k:
        raise ConfigError(f"k_top must be in [1, {k}], got {k_top}")
    if sign not in ("positive", "negative"):
        raise ConfigError(f"sign must be 'positive' or 'negative', got {sign!r}")
    row = w[class_index]
    key = (lambda j: (-row[j], j)) if sign == "positive" else (lambda j: (row[j], j))
    return sorted(range(k), key=key)[:k_top]


def build_filter_report(w: np.ndarray) -> FilterReport:
    """Full per-class sign report plus the globally negative set."""
    w = _check_weights(w)
    positive = []
    negative = []
    for i in range(w.shape[0]):
        pos, neg = classify_filters(w, i)
        positive.append(sorted(pos))
        negative.append(sorted(neg))
    return FilterReport(
        positive=positive,
        negative=negative,
        globally_negative=sorted(globally_negative_filters(w)),
        weights=w,
    )
