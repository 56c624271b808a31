"""Sliding windows, measurement schedules and autoregressive rollouts.

Slot ``s`` of a series is scene ``s``. A rollout warm-starts on the first
``window_len`` measured slots and then, for each later slot, predicts it
from the preceding window. Whether the slot is afterwards filled with the
true measurement or with the prediction follows the schedule
``[M, P * p]`` repeated, starting with a measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import channel, metrics
from . import model as mdl
from .errors import InvalidInputError, InvalidStateError, ShapeError

RSRP_FLOOR_DB = -200.0
FEATURE_MODES = ("rsrp_vector", "rsrp_plus_onehot_index")
NORMALIZATIONS = ("minmax_db", "zscore_db")


@dataclass(frozen=True)
class WindowConfig:
    window_len: int = 4
    feature_mode: str = "rsrp_plus_onehot_index"
    rsrp_normalization: str = "minmax_db"

    def __post_init__(self):
        if self.window_len < 1:
            raise InvalidInputError("window_len must be >= 1")
        if self.feature_mode not in FEATURE_MODES:
            raise InvalidInputError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.rsrp_normalization not in NORMALIZATIONS:
            raise InvalidInputError(f"rsrp_normalization must be one of {NORMALIZATIONS}")

    def feature_dim(self, M: int) -> int:
        return 2 * M if self.feature_mode == "rsrp_plus_onehot_index" else M


def rsrp_db(gains) -> np.ndarray:
    return np.maximum(channel.rsrp(gains), RSRP_FLOOR_DB)


@dataclass(frozen=True)
class Normalizer:
    """Global affine map of RSRP in dB; a zero scale maps everything to 0."""

    mode: str
    offset: float
    scale: float

    @classmethod
    def fit(cls, gain_arrays, mode: str = "minmax_db") -> "Normalizer":
        db = np.concatenate([rsrp_db(g).ravel() for g in gain_arrays])
        if mode == "minmax_db":
            lo, hi = float(db.min()), float(db.max())
            return cls(mode, lo, hi - lo)
        if mode == "zscore_db":
            return cls(mode, float(db.mean()), float(db.std()))
        raise InvalidInputError(f"unknown normalization {mode!r}")

    def apply(self, db) -> np.ndarray:
        db = np.asarray(db, dtype=float)
        if self.scale == 0.0:
            return np.zeros_like(db)
        return (db - self.offset) / self.scale

    def to_dict(self) -> dict:
        return {"mode": self.mode, "offset": self.offset, "scale": self.scale}


def features(gains, wcfg: WindowConfig, norm: Normalizer) -> np.ndarray:
    """Per-slot feature rows: normalized RSRP, optionally followed by a best-beam one-hot."""
    gains = np.asarray(gains, dtype=float)
    f = norm.apply(rsrp_db(gains))
    if wcfg.feature_mode == "rsrp_plus_onehot_index":
        f = np.concatenate([f, np.eye(gains.shape[1])[np.argmax(gains, axis=1)]], axis=1)
    return f


@dataclass(frozen=True)
class WindowSet:
    X: np.ndarray  # (n, W, F)
    best: np.ndarray  # (n,) classification targets
    rsrp: np.ndarray  # (n, M) normalized RSRP regression targets
    slots: np.ndarray  # (n,) target slot of each window

    def targets(self, head: str) -> np.ndarray:
        return self.best if head == "classification" else self.rsrp

    @staticmethod
    def concat(sets) -> "WindowSet":
        sets = list(sets)
        return WindowSet(*(np.concatenate([getattr(s, n) for s in sets]) for n in ("X", "best", "rsrp", "slots")))


def build_windows(gains, wcfg: WindowConfig, norm: Normalizer | None = None) -> WindowSet:
    """``S - W`` windows over slots ``[t, t+W)`` with slot ``t+W`` as target.

    ``norm`` should be fitted on training data; when omitted it is fitted on
    ``gains`` itself.
    """
    gains = np.asarray(gains, dtype=float)
    S, W = gains.shape[0], wcfg.window_len
    if S <= W:
        raise InvalidInputError(f"series of {S} slots is too short for window {W}")
    if norm is None:
        norm = Normalizer.fit([gains], wcfg.rsrp_normalization)
    f = features(gains, wcfg, norm)
    idx = np.arange(S - W)[:, None] + np.arange(W)[None, :]
    slots = np.arange(W, S)
    return WindowSet(f[idx], np.argmax(gains[W:], axis=1), norm.apply(rsrp_db(gains[W:])), slots)


@dataclass(frozen=True)
class Schedule:
    predictions_per_measurement: int = 0
    slot_interval_ms: float = 80.0

    def __post_init__(self):
        if self.predictions_per_measurement < 0:
            raise InvalidInputError("predictions_per_measurement must be >= 0")

    @property
    def p(self) -> int:
        return self.predictions_per_measurement

    @property
    def measurement_interval_ms(self) -> float:
        return (self.p + 1) * self.slot_interval_ms

    def is_measured(self, offset: int) -> bool:
        """Kind of the ``offset``-th rollout slot (offset 0 is a measurement)."""
        return offset % (self.p + 1) == 0

    def pattern(self, n: int) -> str:
        return "".join("M" if self.is_measured(j) else "P" for j in range(n))


class ModelPredictor:
    """Wraps a parameter snapshot; ``slot`` is ignored."""

    def __init__(self, params, spec: mdl.ModelSpec):
        self.params, self.spec = params, spec
        self.head = spec.head

    def predict(self, window, slot=None):
        return mdl.predict(self.params, self.spec, window)


class OraclePredictor:
    """Returns the truth of the requested slot whatever the window holds."""

    def __init__(self, gains, norm: Normalizer, head: str):
        gains = np.asarray(gains, dtype=float)
        self.head = head
        if head == "classification":
            self._out = np.eye(gains.shape[1])[np.argmax(gains, axis=1)]
        else:
            self._out = norm.apply(rsrp_db(gains))

    def predict(self, window, slot):
        return self._out[slot]


@dataclass
class TrackRecord:
    head: str
    p: int
    slots: np.ndarray  # (n,) predicted slot indices
    measured: np.ndarray  # (n,) bool, slot filled by a measurement
    window_slots: np.ndarray  # (n, W) slot index of every window entry
    window_measured: np.ndarray  # (n, W) bool provenance of every window entry
    outputs: np.ndarray  # (n, M) probabilities or normalized RSRP
    true_gains: np.ndarray  # (n, M) linear magnitudes
    allowed: np.ndarray | None = None  # (n, M) prefilter mask

    @property
    def scores(self) -> np.ndarray:
        if self.allowed is None:
            return self.outputs
        return np.where(self.allowed, self.outputs, -np.inf)

    @property
    def chosen(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)

    @property
    def true_best(self) -> np.ndarray:
        return np.argmax(self.true_gains, axis=1)

    @property
    def n_measured(self) -> int:
        return int(self.measured.sum())

    @property
    def n_full(self) -> int:
        return int(self.measured.size)

    def topk(self, k: int) -> metrics.TopKResult:
        return evaluate_topk(self.head, self.scores, self.true_gains, k)

    def power_gains(self) -> tuple[np.ndarray, np.ndarray]:
        """Linear power of the chosen and of the best beam per slot."""
        rows = np.arange(self.true_gains.shape[0])
        power = self.true_gains ** 2
        return power[rows, self.chosen], power.max(axis=1)

    def throughput_ratio(self) -> metrics.TrResult:
        return metrics.throughput_ratio(*self.power_gains())

    @staticmethod
    def concat(records) -> "TrackRecord":
        records = list(records)
        first = records[0]
        cat = {n: np.concatenate([getattr(r, n) for r in records])
               for n in ("slots", "measured", "window_slots", "window_measured", "outputs", "true_gains")}
        allowed = None
        if first.allowed is not None:
            allowed = np.concatenate([r.allowed for r in records])
        return TrackRecord(first.head, first.p, allowed=allowed, **cat)


def evaluate_topk(head: str, scores, true_gains, k: int) -> metrics.TopKResult:
    if head == "classification":
        return metrics.topk_accuracy(scores, np.argmax(true_gains, axis=1), k)
    return metrics.topk_regression(scores, true_gains, k)


def rollout(predictor, schedule: Schedule, gains, wcfg: WindowConfig, norm: Normalizer,
            allowed=None) -> TrackRecord:
    """Walk one series slot by slot, substituting predictions on unmeasured slots.

    Regression predictions are written back as the slot's RSRP row. For
    classification the predicted index enters the one-hot channel while the
    RSRP channel holds the last measured row. ``allowed`` is an optional
    (S, M) prefilter mask applied when choosing beams.
    """
    gains = np.asarray(gains, dtype=float)
    S, M = gains.shape
    W = wcfg.window_len
    if S <= W:
        raise InvalidInputError(f"series of {S} slots is too short for window {W}")
    if predictor.head not in mdl.HEADS:
        raise InvalidStateError(f"unknown predictor head {predictor.head!r}")
    if allowed is not None and np.shape(allowed) != (S, M):
        raise ShapeError(f"allowed mask must be {(S, M)}")
    truth = features(gains, wcfg, norm)
    hist = np.empty_like(truth)
    hist[:W] = truth[:W]
    prov = np.zeros(S, dtype=bool)
    prov[:W] = True
    last_measured_rsrp = truth[W - 1, :M].copy()
    onehot = wcfg.feature_mode == "rsrp_plus_onehot_index"

    n = S - W
    outputs = np.empty((n, M))
    measured = np.empty(n, dtype=bool)
    win_slots = np.empty((n, W), dtype=int)
    win_meas = np.empty((n, W), dtype=bool)
    for j, t in enumerate(range(W, S)):
        win_slots[j] = np.arange(t - W, t)
        win_meas[j] = prov[t - W:t]
        out = np.asarray(predictor.predict(hist[t - W:t], t), dtype=float)
        if out.shape != (M,):
            raise ShapeError(f"predictor returned shape {out.shape}, expected ({M},)")
        outputs[j] = out
        measured[j] = schedule.is_measured(j)
        if measured[j]:
            hist[t] = truth[t]
            last_measured_rsrp = truth[t, :M].copy()
        else:
            row = out.copy() if predictor.head == "regression" else last_measured_rsrp
            hist[t, :M] = row
            if onehot:
                hist[t, M:] = np.eye(M)[int(np.argmax(out))]
        prov[t] = measured[j]
    return TrackRecord(
        head=predictor.head, p=schedule.p, slots=np.arange(W, S), measured=measured,
        window_slots=win_slots, window_measured=win_meas, outputs=outputs,
        true_gains=gains[W:].copy(),
        allowed=None if allowed is None else np.asarray(allowed, dtype=bool)[W:].copy(),
    )


# ---------------------------------------------------------------- pre-filter


@dataclass(frozen=True)
class PrefilterConfig:
    enabled: bool = False
    subset_size: int = 8
    bs_position: tuple | None = None
    ue_position_source: str = "scene"
    position_noise_m: float = 0.0

    def __post_init__(self):
        if self.subset_size < 1:
            raise InvalidInputError("subset_size must be >= 1")
        if self.ue_position_source != "scene":
            raise InvalidInputError("only scene-reported UE positions are supported")


def bs_to_ue_azimuth(bs_position, ue_position) -> float:
    dx = ue_position[0] - bs_position[0]
    dy = ue_position[1] - bs_position[1]
    return float(np.degrees(np.arctan2(dy, dx)))


def prefilter(bs_position, ue_position, subset_size: int, boresights) -> np.ndarray:
    """The ``subset_size`` transmit beams whose boresight is circularly closest
    to the BS->UE azimuth, returned in ascending index order (ties: lower index)."""
    boresights = np.asarray(boresights, dtype=float)
    if not 1 <= subset_size <= boresights.size:
        raise InvalidInputError(f"subset size {subset_size} outside [1, {boresights.size}]")
    theta = bs_to_ue_azimuth(bs_position, ue_position)
    dist = np.abs(channel.wrap_degrees(boresights - theta))
    order = np.argsort(dist, kind="stable")
    return np.sort(order[:subset_size])


def expand_tx_subset(tx_beams, n_rx: int) -> np.ndarray:
    """Flat pair indices ``t * n_rx + r`` for every receive beam of the given transmit beams."""
    tx_beams = np.asarray(tx_beams, dtype=int)
    return (tx_beams[:, None] * n_rx + np.arange(n_rx)[None, :]).ravel()


def prefilter_mask(positions, pcfg: PrefilterConfig, bs_position, boresights, n_rx: int, rng=None) -> np.ndarray:
    """(S, M) boolean mask of allowed beam pairs for a series of UE positions."""
    positions = np.asarray(positions, dtype=float)
    if pcfg.position_noise_m > 0:
        rng = np.random.default_rng(rng)
        positions = positions + rng.normal(0.0, pcfg.position_noise_m, positions.shape)
    M = len(boresights) * n_rx
    mask = np.zeros((positions.shape[0], M), dtype=bool)
    for s, pos in enumerate(positions):
        mask[s, expand_tx_subset(prefilter(bs_position, pos, pcfg.subset_size, boresights), n_rx)] = True
    return mask


# ---------------------------------------------------------------- baseline


def persistence_baseline(best_sequence) -> np.ndarray:
    """Prediction for slots 1..S-1: the previous slot's true best beam."""
    best = np.asarray(best_sequence, dtype=int)
    if best.size < 2:
        raise InvalidInputError("persistence needs at least 2 slots")
    return best[:-1].copy()
