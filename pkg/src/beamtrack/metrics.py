"""Evaluation metrics: Top-K accuracy, throughput ratio, MAFD and MOR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError, ShapeError


@dataclass(frozen=True)
class TopKResult:
    k: int
    hits: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.hits / self.total if self.total else 0.0


@dataclass(frozen=True)
class TrResult:
    numerator: float
    denominator: float

    @property
    def ratio(self) -> float:
        return self.numerator / self.denominator


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ties go to the lower index (stable sort on the negated scores).
    """
    order = np.argsort(-np.asarray(scores, dtype=float), axis=-1, kind="stable")
    return order[..., :k]


def _as_batch(scores):
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2:
        raise ShapeError(f"expected (examples, beams) scores, got shape {s.shape}")
    return s


def topk_accuracy(predicted_scores, true_best, k: int) -> TopKResult:
    """Hit when the true best beam is among the ``k`` highest predicted scores."""
    s = _as_batch(predicted_scores)
    true_best = np.atleast_1d(np.asarray(true_best, dtype=int))
    if true_best.shape[0] != s.shape[0]:
        raise ShapeError("one true index per score vector required")
    m = s.shape[1]
    if not 1 <= k <= m:
        raise InvalidInputError(f"k={k} outside [1, {m}]")
    if np.any((true_best < 0) | (true_best >= m)):
        raise InvalidInputError("true beam index out of range")
    top = top_k_indices(s, k)
    hits = int(np.sum(np.any(top == true_best[:, None], axis=1)))
    return TopKResult(k, hits, s.shape[0])


def topk_regression(predicted_gains, true_gains, k: int) -> TopKResult:
    """Hit when the predicted best beam is among the ``k`` strongest true beams."""
    p = _as_batch(predicted_gains)
    t = _as_batch(true_gains)
    if p.shape != t.shape:
        raise ShapeError(f"predicted {p.shape} vs true {t.shape}")
    m = p.shape[1]
    if not 1 <= k <= m:
        raise InvalidInputError(f"k={k} outside [1, {m}]")
    chosen = np.argmax(p, axis=1)
    top = top_k_indices(t, k)
    hits = int(np.sum(np.any(top == chosen[:, None], axis=1)))
    return TopKResult(k, hits, p.shape[0])


def throughput_ratio(predicted_gain, best_gain) -> TrResult:
    """``sum log2(1 + y_pred) / sum log2(1 + y_best)`` over examples.

    Gains are linear power gains of the chosen and of the optimal beam.
    """
    pg = np.atleast_1d(np.asarray(predicted_gain, dtype=float))
    bg = np.atleast_1d(np.asarray(best_gain, dtype=float))
    if pg.shape != bg.shape:
        raise ShapeError("predicted and best gains must align")
    if np.any(pg < 0) or np.any(bg < 0):
        raise InvalidInputError("gains must be non-negative")
    num = float(np.sum(np.log2(1.0 + pg)))
    den = float(np.sum(np.log2(1.0 + bg)))
    if den == 0.0:
        raise DegenerateInputError("throughput ratio denominator is zero")
    return TrResult(num, den)


def circular_diff(prev: int, curr: int, n_total: int) -> int:
    for v in (prev, curr):
        if not 0 <= v < n_total:
            raise InvalidInputError(f"beam index {v} outside [0, {n_total})")
    return min((prev - curr) % n_total, (curr - prev) % n_total)


def circular_diffs(sequence, n_total: int) -> np.ndarray:
    """Vectorised wrap-around first differences of one index sequence."""
    s = np.asarray(sequence, dtype=int)
    if np.any((s < 0) | (s >= n_total)):
        raise InvalidInputError(f"beam index outside [0, {n_total})")
    fwd = (s[:-1] - s[1:]) % n_total
    bwd = (s[1:] - s[:-1]) % n_total
    return np.minimum(fwd, bwd)


def mafd(sequences, n_total: int) -> float:
    """Mean over receivers of each receiver's mean circular first difference."""
    if len(sequences) == 0:
        raise InvalidInputError("no sequences")
    per_rx = []
    for seq in sequences:
        if len(seq) < 2:
            raise InvalidInputError("every sequence needs at least 2 scenes")
        per_rx.append(circular_diffs(seq, n_total).mean())
    return float(np.mean(per_rx))


def mor(n_measured: int, n_full: int) -> float:
    """Measurement overhead reduction in percent."""
    if n_full <= 0:
        raise InvalidInputError("n_full must be positive")
    if not 0 <= n_measured <= n_full:
        raise InvalidInputError(f"n_measured={n_measured} outside [0, {n_full}]")
    return (1.0 - n_measured / n_full) * 100.0
