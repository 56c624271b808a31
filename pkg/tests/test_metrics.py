import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrack import metrics
from beamtrack.errors import DegenerateInputError, InvalidInputError, ShapeError


def _sort_oracle_hit(scores, truth, k):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return truth in ranked[:k]


def _naive_mafd(sequences, n):
    per = []
    for seq in sequences:
        diffs = []
        for a, b in zip(seq[:-1], seq[1:]):
            d = abs(a - b)
            diffs.append(min(d, n - d))
        per.append(Fraction(sum(diffs), len(diffs)))
    return sum(per) / len(per)


sequences_st = st.integers(2, 40).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.lists(st.integers(0, n - 1), min_size=2, max_size=30),
                                             min_size=1, max_size=5)))


class TestTopK:
    def test_hit_at_k2(self):
        r = metrics.topk_accuracy([0.1, 0.5, 0.3, 0.2], [2], 2)
        assert (r.hits, r.total, r.accuracy) == (1, 1, 1.0)

    def test_miss_at_k1(self):
        assert metrics.topk_accuracy([0.1, 0.5, 0.3, 0.2], [2], 1).accuracy == 0.0

    def test_tie_break_lower_index(self):
        assert metrics.topk_accuracy([0.5, 0.5, 0.1], [0], 1).hits == 1
        assert metrics.topk_accuracy([0.5, 0.5, 0.1], [1], 1).hits == 0

    def test_k_equal_m_always_hits(self):
        rng = np.random.default_rng(0)
        s = rng.random((50, 7))
        assert metrics.topk_accuracy(s, rng.integers(0, 7, 50), 7).accuracy == 1.0

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(InvalidInputError):
            metrics.topk_accuracy([0.1, 0.2, 0.3, 0.4], [0], k)

    def test_true_index_out_of_range(self):
        with pytest.raises(InvalidInputError):
            metrics.topk_accuracy([0.1, 0.2], [2], 1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.topk_accuracy(np.zeros((3, 4)), [0, 1], 1)

    def test_matches_sort_oracle_with_ties(self):
        rng = np.random.default_rng(3)
        s = rng.integers(0, 4, size=(500, 8)).astype(float)
        truth = rng.integers(0, 8, 500)
        for k in range(1, 9):
            expect = sum(_sort_oracle_hit(list(row), int(t), k) for row, t in zip(s, truth))
            assert metrics.topk_accuracy(s, truth, k).hits == expect

    def test_regression_variant(self):
        pred = [[0.1, 0.9, 0.2], [0.8, 0.1, 0.2]]
        true = [[0.2, 0.5, 0.7], [0.1, 0.3, 0.9]]
        assert metrics.topk_regression(pred, true, 1).hits == 0
        assert metrics.topk_regression(pred, true, 2).hits == 1
        assert metrics.topk_regression(pred, true, 3).hits == 2

    def test_regression_identity_hits_every_k(self):
        g = np.random.default_rng(1).random((20, 6))
        assert all(metrics.topk_regression(g, g, k).accuracy == 1.0 for k in range(1, 7))

    def test_regression_matches_sort_oracle(self):
        rng = np.random.default_rng(4)
        pred, true = rng.random((1000, 8)), rng.integers(0, 5, (1000, 8)).astype(float)
        for k in (1, 3, 5):
            expect = sum(_sort_oracle_hit(list(t), int(np.argmax(p)), k) for p, t in zip(pred, true))
            assert metrics.topk_regression(pred, true, k).hits == expect

    def test_regression_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.topk_regression(np.zeros((2, 3)), np.zeros((2, 4)), 1)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 32))
    @settings(max_examples=30)
    def test_monotone_in_k(self, seed, m):
        rng = np.random.default_rng(seed)
        s = rng.random((40, m))
        t = rng.integers(0, m, 40)
        acc = [metrics.topk_accuracy(s, t, k).accuracy for k in range(1, m + 1)]
        assert all(a <= b for a, b in zip(acc, acc[1:]))
        assert acc[-1] == 1.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.random((30, 10))
        t = rng.integers(0, 10, 30)
        perm = rng.permutation(30)
        for k in (1, 3, 10):
            assert metrics.topk_accuracy(s, t, k) == metrics.topk_accuracy(s[perm], t[perm], k)


class TestThroughputRatio:
    def test_equal_gains(self):
        assert metrics.throughput_ratio([3.0, 1.0], [3.0, 1.0]).ratio == 1.0

    def test_value(self):
        r = metrics.throughput_ratio([1.0], [3.0])
        assert r.ratio == pytest.approx(0.5, abs=1e-15)

    def test_zero_denominator(self):
        with pytest.raises(DegenerateInputError):
            metrics.throughput_ratio([0.0, 0.0], [0.0, 0.0])

    def test_negative_gain(self):
        with pytest.raises(InvalidInputError):
            metrics.throughput_ratio([-1.0], [1.0])

    @given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6)), min_size=1, max_size=50))
    def test_bounded_when_pred_le_best(self, pairs):
        pred = [min(a, b) for a, b in pairs]
        best = [max(a, b) for a, b in pairs]
        if sum(math.log2(1 + b) for b in best) == 0:
            return
        r = metrics.throughput_ratio(pred, best).ratio
        assert 0.0 <= r <= 1.0


class TestMafd:
    def test_worked_example(self):
        seq = [1, 1, 0, 2, 1, 2, 0]
        assert metrics.circular_diffs(seq, 3).tolist() == [0, 1, 1, 1, 1, 1]
        assert metrics.mafd([seq], 3) == 5 / 6

    def test_wrap_uses_short_way(self):
        assert metrics.circular_diff(0, 63, 64) == 1
        assert metrics.circular_diff(2, 0, 3) == 1

    def test_constant_is_zero(self):
        assert metrics.mafd([[4] * 10], 8) == 0.0

    def test_single_scene_rejected(self):
        with pytest.raises(InvalidInputError):
            metrics.mafd([[1]], 4)

    def test_out_of_range_index(self):
        with pytest.raises(InvalidInputError):
            metrics.mafd([[0, 4]], 4)
        with pytest.raises(InvalidInputError):
            metrics.circular_diff(0, 4, 4)

    def test_averaged_per_series_first(self):
        # a long smooth series must not swamp a short volatile one
        assert metrics.mafd([[0] * 101, [0, 2]], 4) == 1.0

    def test_circular_diff_exhaustive(self):
        for n in range(1, 13):
            for a in range(n):
                for b in range(n):
                    d = metrics.circular_diff(a, b, n)
                    assert d == metrics.circular_diff(b, a, n)
                    assert 0 <= d <= n // 2
                    assert (d == 0) == (a == b)

    @given(sequences_st)
    def test_matches_naive_oracle(self, case):
        n, seqs = case
        assert metrics.mafd(seqs, n) == pytest.approx(float(_naive_mafd(seqs, n)), abs=1e-12)

    @given(sequences_st, st.integers(0, 1000))
    def test_shift_invariance(self, case, c):
        n, seqs = case
        shifted = [[(v + c) % n for v in s] for s in seqs]
        assert metrics.mafd(shifted, n) == pytest.approx(metrics.mafd(seqs, n), abs=1e-12)

    @given(sequences_st)
    def test_range(self, case):
        n, seqs = case
        assert 0.0 <= metrics.mafd(seqs, n) <= n // 2

    def test_order_matters(self):
        # permuting scenes inside a series is not a symmetry
        assert metrics.mafd([[0, 0, 2, 2]], 8) != metrics.mafd([[0, 2, 0, 2]], 8)


class TestMor:
    @pytest.mark.parametrize("m,n,expected", [(100, 100, 0.0), (50, 100, 50.0), (0, 10, 100.0)])
    def test_values(self, m, n, expected):
        assert metrics.mor(m, n) == expected

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            metrics.mor(5, 0)
        with pytest.raises(InvalidInputError):
            metrics.mor(11, 10)
