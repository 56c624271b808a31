import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrack import channel, metrics, model, tracking
from beamtrack.errors import InvalidInputError, ShapeError
from beamtrack.tracking import Normalizer, Schedule, WindowConfig


def _gains(S=12, M=8, seed=0):
    return np.random.default_rng(seed).random((S, M)) + 0.01


def _cyclic(S=30, M=8):
    """Best beam advances by one each slot: row t is the base row rolled by t."""
    base = np.linspace(1.0, 0.1, M)
    return np.stack([np.roll(base, t) for t in range(S)])


class ShiftPredictor:
    """Window-driven predictor that is exact on :func:`_cyclic` series."""

    def __init__(self, head, M):
        self.head, self.M = head, M

    def predict(self, window, slot):
        last = window[-1]
        if self.head == "regression":
            return np.roll(last[:self.M], 1)
        return np.roll(last[self.M:], 1)


class TestWindows:
    def test_count(self):
        ws = tracking.build_windows(_gains(10), WindowConfig(window_len=4))
        assert ws.X.shape == (6, 4, 16)
        assert ws.slots.tolist() == list(range(4, 10))

    def test_constant_gains_map_to_zero(self):
        ws = tracking.build_windows(np.ones((6, 4)), WindowConfig(window_len=2, feature_mode="rsrp_vector"))
        np.testing.assert_array_equal(ws.X, 0.0)
        np.testing.assert_array_equal(ws.rsrp, 0.0)

    @pytest.mark.parametrize("mode", ["minmax_db", "zscore_db"])
    def test_slicing_oracle(self, mode):
        g = _gains(11, 5, seed=1)
        wcfg = WindowConfig(window_len=3, rsrp_normalization=mode)
        norm = Normalizer.fit([_gains(20, 5, seed=2)], mode)
        ws = tracking.build_windows(g, wcfg, norm)
        db = 20 * np.log10(g)
        rows = (db - norm.offset) / norm.scale
        for t in range(11 - 3):
            for w in range(3):
                s = t + w
                np.testing.assert_allclose(ws.X[t, w, :5], rows[s], atol=1e-12)
                onehot = np.zeros(5)
                onehot[int(np.argmax(g[s]))] = 1.0
                np.testing.assert_array_equal(ws.X[t, w, 5:], onehot)
            assert ws.best[t] == int(np.argmax(g[t + 3]))
            np.testing.assert_allclose(ws.rsrp[t], rows[t + 3], atol=1e-12)

    def test_minmax_range(self):
        g = _gains(9, 4)
        ws = tracking.build_windows(g, WindowConfig(window_len=2, feature_mode="rsrp_vector"))
        assert ws.X.min() >= 0.0 and ws.X.max() <= 1.0

    def test_floor_for_zero_gain(self):
        assert tracking.rsrp_db(np.array([[0.0, 1.0]]))[0, 0] == tracking.RSRP_FLOOR_DB

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            tracking.build_windows(_gains(4), WindowConfig(window_len=4))

    def test_feature_dim(self):
        assert WindowConfig().feature_dim(16) == 32
        assert WindowConfig(feature_mode="rsrp_vector").feature_dim(16) == 16


class TestSchedule:
    def test_pattern_p2(self):
        assert Schedule(2).pattern(9) == "MPPMPPMPP"
        assert Schedule(2).measurement_interval_ms == 240.0

    def test_negative(self):
        with pytest.raises(InvalidInputError):
            Schedule(-1)


class TestRollout:
    def _model(self, M=8, head="classification", W=4):
        wcfg = WindowConfig(window_len=W)
        spec = model.ModelSpec(wcfg.feature_dim(M), M, hidden_dims=(6,), head=head)
        return tracking.ModelPredictor(model.init_params(spec, 0), spec), wcfg

    def test_p2_provenance_and_mor(self):
        g = _gains(13)
        pred, wcfg = self._model()
        rec = tracking.rollout(pred, Schedule(2), g, wcfg, Normalizer.fit([g]))
        assert "".join("M" if m else "P" for m in rec.measured) == "MPPMPPMPP"
        assert round(metrics.mor(rec.n_measured, rec.n_full), 1) == 66.7

    @pytest.mark.parametrize("head", model.HEADS)
    def test_p0_equals_batch_prediction(self, head):
        g = _gains(15)
        pred, wcfg = self._model(head=head)
        norm = Normalizer.fit([g], "zscore_db")
        rec = tracking.rollout(pred, Schedule(0), g, wcfg, norm)
        ws = tracking.build_windows(g, wcfg, norm)
        assert rec.window_measured.all()
        # batched and per-window matmuls may round differently in the last bit
        np.testing.assert_allclose(rec.outputs, model.predict(pred.params, pred.spec, ws.X), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("head", model.HEADS)
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_oracle_matches_full_measurement(self, head, p):
        g = _gains(40, seed=p)
        wcfg = WindowConfig()
        norm = Normalizer.fit([g])
        full = tracking.rollout(tracking.OraclePredictor(g, norm, head), Schedule(0), g, wcfg, norm)
        part = tracking.rollout(tracking.OraclePredictor(g, norm, head), Schedule(p), g, wcfg, norm)
        np.testing.assert_array_equal(full.outputs, part.outputs)
        assert full.topk(1) == part.topk(1)
        assert full.throughput_ratio() == part.throughput_ratio()

    @pytest.mark.parametrize("head", model.HEADS)
    def test_exact_window_predictor_lossless(self, head):
        g = _cyclic()
        M = g.shape[1]
        wcfg = WindowConfig(window_len=3)
        norm = Normalizer.fit([g])
        full = tracking.rollout(ShiftPredictor(head, M), Schedule(0), g, wcfg, norm)
        part = tracking.rollout(ShiftPredictor(head, M), Schedule(3), g, wcfg, norm)
        np.testing.assert_allclose(full.outputs, part.outputs, atol=1e-12)
        assert part.topk(1).accuracy == 1.0

    def test_window_causality(self):
        g = _gains(25)
        pred, wcfg = self._model()
        rec = tracking.rollout(pred, Schedule(1), g, wcfg, Normalizer.fit([g]))
        assert np.all(rec.window_slots < rec.slots[:, None])
        assert np.all(rec.window_slots[:, -1] == rec.slots - 1)

    def test_window_provenance_matches_schedule(self):
        g = _gains(25)
        pred, wcfg = self._model()
        rec = tracking.rollout(pred, Schedule(2), g, wcfg, Normalizer.fit([g]))
        kind = dict(zip(rec.slots.tolist(), rec.measured.tolist()))
        for slots, flags in zip(rec.window_slots, rec.window_measured):
            for s, f in zip(slots, flags):
                assert f == (s < wcfg.window_len or kind[s])

    @pytest.mark.parametrize("p,expected", [(1, 50.0), (2, 66.7), (3, 75.0)])
    def test_long_horizon_mor(self, p, expected):
        g = _gains(124, 4)
        norm = Normalizer.fit([g])
        rec = tracking.rollout(tracking.OraclePredictor(g, norm, "regression"), Schedule(p), g,
                               WindowConfig(), norm)
        assert abs(metrics.mor(rec.n_measured, rec.n_full) - expected) <= 1.0

    def test_bad_predictor_shape(self):
        class Wrong:
            head = "regression"

            def predict(self, window, slot):
                return np.zeros(3)

        g = _gains(8)
        with pytest.raises(ShapeError):
            tracking.rollout(Wrong(), Schedule(0), g, WindowConfig(), Normalizer.fit([g]))

    def test_allowed_mask_restricts_choice(self):
        g = _gains(10)
        pred, wcfg = self._model()
        allowed = np.zeros((10, 8), dtype=bool)
        allowed[:, 2:4] = True
        rec = tracking.rollout(pred, Schedule(0), g, wcfg, Normalizer.fit([g]), allowed=allowed)
        assert set(rec.chosen.tolist()) <= {2, 3}

    def test_concat(self):
        g = _gains(10)
        pred, wcfg = self._model()
        norm = Normalizer.fit([g])
        a = tracking.rollout(pred, Schedule(1), g, wcfg, norm)
        both = tracking.TrackRecord.concat([a, a])
        assert both.n_full == 2 * a.n_full
        assert both.topk(1).hits == 2 * a.topk(1).hits


class TestPrefilter:
    BS = (0.0, 0.0)

    def test_full_subset_is_identity(self):
        b = channel.codebook_boresights(8, 90.0)
        np.testing.assert_array_equal(tracking.prefilter(self.BS, (3.0, 4.0), 8, b), np.arange(8))

    def test_on_boresight(self):
        b = channel.codebook_boresights(16, 90.0)
        for k, az in enumerate(b):
            ue = (10 * np.cos(np.radians(az)), 10 * np.sin(np.radians(az)))
            assert tracking.prefilter(self.BS, ue, 1, b).tolist() == [k]

    def test_too_large(self):
        with pytest.raises(InvalidInputError):
            tracking.prefilter(self.BS, (1.0, 1.0), 9, channel.codebook_boresights(8, 0.0))

    def test_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        b = channel.codebook_boresights(16, 90.0)
        for _ in range(200):
            ue = rng.uniform(-50, 50, 2)
            n = int(rng.integers(1, 17))
            theta = np.degrees(np.arctan2(ue[1], ue[0]))
            dist = []
            for k, az in enumerate(b):
                d = abs(az - theta) % 360.0
                dist.append((min(d, 360.0 - d), k))
            expect = sorted(k for _, k in sorted(dist)[:n])
            assert tracking.prefilter(self.BS, ue, n, b).tolist() == expect

    def test_expand_pairs(self):
        assert tracking.expand_tx_subset([1, 3], 2).tolist() == [2, 3, 6, 7]

    @given(st.integers(0, 2**31 - 1), st.integers(1, 16))
    @settings(max_examples=50)
    def test_soundness(self, seed, n):
        rng = np.random.default_rng(seed)
        b = channel.codebook_boresights(16, 90.0)
        gains = rng.random(16)
        subset = tracking.prefilter(self.BS, rng.uniform(-50, 50, 2), n, b)
        best = int(np.argmax(gains))
        if best in subset:
            restricted = subset[int(np.argmax(gains[subset]))]
            assert restricted == best

    def test_mask_shape(self):
        b = channel.codebook_boresights(4, 90.0)
        mask = tracking.prefilter_mask(np.array([[1.0, 5.0, 0.0], [-3.0, 2.0, 0.0]]),
                                       tracking.PrefilterConfig(enabled=True, subset_size=2), self.BS, b, 2)
        assert mask.shape == (2, 8) and mask.sum(axis=1).tolist() == [4, 4]


class TestPersistence:
    def test_constant(self):
        pred = tracking.persistence_baseline([3] * 6)
        assert metrics.topk_accuracy(np.eye(8)[pred], [3] * 5, 1).accuracy == 1.0

    def test_alternating(self):
        seq = [0, 1, 0, 1, 0]
        pred = tracking.persistence_baseline(seq)
        assert np.mean(pred == np.array(seq[1:])) == 0.0

    @given(st.lists(st.integers(0, 7), min_size=2, max_size=60))
    def test_change_fraction(self, seq):
        pred = tracking.persistence_baseline(seq)
        changes = sum(a != b for a, b in zip(seq, seq[1:]))
        assert np.mean(pred == np.array(seq[1:])) == pytest.approx(1 - changes / (len(seq) - 1))

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            tracking.persistence_baseline([1])
