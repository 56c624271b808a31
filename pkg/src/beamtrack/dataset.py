"""Episode/scene data model, scene-records I/O and a synthetic V2I generator.

A dataset is a list of episodes; each episode holds one scene series per
receiver, all series of equal length. Scene ``s`` is sampled at
``s * scene_interval_ms``.

scene-records file layout (whitespace separated, one scene per line)::

    #scene-records n_tx=16 n_rx=1 scene_interval_ms=80 M=16 [tx_orientation=..] [rx_orientation=..]
    episode_id scene_id receiver_id x y z los mpc  g_re g_im aod_az aod_el aoa_az aoa_el  ...
    episode_id scene_id receiver_id x y z los gains  |y_0| ... |y_{M-1}|

Further lines starting with ``#`` are comments. MPC angles are global
azimuths in degrees; the header orientations place the arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import channel
from .channel import ArrayConfig, MultipathComponent
from .errors import InvalidInputError, ParseError, ValidationError
from .metrics import mafd

logger = logging.getLogger(__name__)

HEADER_TAG = "#scene-records"
SPEED_OF_LIGHT = 299_792_458.0


@dataclass
class Scene:
    episode_id: int
    scene_id: int
    receiver_id: int
    rx_position: tuple
    los: bool
    timestamp_ms: float
    mpcs: tuple | None = None
    gains: np.ndarray | None = None

    @property
    def best_beam(self) -> int:
        return channel.best_beam(self.gains)


@dataclass
class Episode:
    id: int
    receivers: list  # list[list[Scene]], one series per receiver
    scene_interval_ms: float = 80.0

    @property
    def num_scenes(self) -> int:
        return len(self.receivers[0]) if self.receivers else 0

    def scenes(self) -> Iterator[Scene]:
        for series in self.receivers:
            yield from series


@dataclass
class Dataset:
    """Episodes plus the array metadata carried by the file header."""

    episodes: list
    n_tx: int
    n_rx: int
    scene_interval_ms: float = 80.0
    tx_orientation: float = 0.0
    rx_orientation: float = 0.0

    @property
    def M(self) -> int:
        return self.n_tx * self.n_rx

    @property
    def tx_array(self) -> ArrayConfig:
        return ArrayConfig(self.n_tx, orientation=self.tx_orientation)

    @property
    def rx_array(self) -> ArrayConfig:
        return ArrayConfig(self.n_rx, orientation=self.rx_orientation)

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]

    def with_episodes(self, episodes) -> "Dataset":
        return replace(self, episodes=list(episodes))


@dataclass(frozen=True)
class Series:
    """Arrays for one (episode, receiver) scene series."""

    episode_id: int
    receiver_id: int
    gains: np.ndarray  # (S, M) linear magnitudes
    positions: np.ndarray  # (S, 3)
    los: np.ndarray  # (S,) bool

    @property
    def best(self) -> np.ndarray:
        return np.argmax(self.gains, axis=1)


def iter_series(episodes) -> Iterator[Series]:
    """Series in deterministic (episode, receiver) order."""
    for ep in sorted(episodes, key=lambda e: e.id):
        for scenes in sorted(ep.receivers, key=lambda s: s[0].receiver_id):
            if any(s.gains is None for s in scenes):
                raise ValidationError(f"episode {ep.id}: scene without gains")
            yield Series(
                episode_id=ep.id,
                receiver_id=scenes[0].receiver_id,
                gains=np.stack([s.gains for s in scenes]),
                positions=np.array([s.rx_position for s in scenes], dtype=float),
                los=np.array([s.los for s in scenes], dtype=bool),
            )


# ---------------------------------------------------------------- I/O


def _parse_header(line: str) -> dict:
    tokens = line.split()
    if not tokens or tokens[0] != HEADER_TAG:
        raise ParseError(f"expected header starting with {HEADER_TAG!r}", 1)
    meta = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ParseError(f"malformed header token {tok!r}", 1)
        k, v = tok.split("=", 1)
        meta[k] = v
    for key in ("n_tx", "n_rx", "scene_interval_ms", "M"):
        if key not in meta:
            raise ParseError(f"header missing {key}", 1)
    try:
        out = {
            "n_tx": int(meta["n_tx"]),
            "n_rx": int(meta["n_rx"]),
            "scene_interval_ms": float(meta["scene_interval_ms"]),
            "M": int(meta["M"]),
            "tx_orientation": float(meta.get("tx_orientation", 0.0)),
            "rx_orientation": float(meta.get("rx_orientation", 0.0)),
        }
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", 1) from None
    if out["n_tx"] < 1 or out["n_rx"] < 1:
        raise ParseError("array sizes must be positive", 1)
    if out["M"] != out["n_tx"] * out["n_rx"]:
        raise ParseError(f"M={out['M']} does not equal n_tx*n_rx", 1)
    if not out["scene_interval_ms"] > 0:
        raise ParseError("scene_interval_ms must be positive", 1)
    return out


def _parse_record(tokens: list, lineno: int, M: int) -> tuple:
    if len(tokens) < 8:
        raise ParseError("record too short", lineno)
    try:
        ep, sc, rx = (int(t) for t in tokens[:3])
        pos = tuple(float(t) for t in tokens[3:6])
        los = int(tokens[6])
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    if los not in (0, 1):
        raise ParseError("los flag must be 0 or 1", lineno)
    kind, rest = tokens[7], tokens[8:]
    if "mpc" in tokens[7:] and "gains" in tokens[7:]:
        raise ValidationError(f"line {lineno}: record carries both mpc and gains")
    if kind not in ("mpc", "gains"):
        raise ParseError(f"expected 'mpc' or 'gains', got {kind!r}", lineno)
    try:
        values = [float(t) for t in rest]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    mpcs = gains = None
    if kind == "mpc":
        if len(values) == 0 or len(values) % 6:
            raise ParseError("mpc payload must hold 6 values per path", lineno)
        try:
            mpcs = tuple(
                MultipathComponent(complex(v[0], v[1]), v[2], v[3], v[4], v[5])
                for v in (values[i:i + 6] for i in range(0, len(values), 6))
            )
        except InvalidInputError as exc:
            raise ParseError(str(exc), lineno) from None
    else:
        if len(values) != M:
            raise ParseError(f"gains payload has {len(values)} values, header says M={M}", lineno)
        gains = np.array(values)
        if np.any(~np.isfinite(gains)) or np.any(gains < 0):
            raise ParseError("gains must be finite and non-negative", lineno)
    return ep, sc, rx, pos, bool(los), mpcs, gains


def ingest(path, format: str = "scene-records") -> Dataset:
    """Read and validate a scene-records file.

    Scenes given as raw MPCs get their beam gains computed on the DFT
    codebooks implied by the header.
    """
    if format != "scene-records":
        raise InvalidInputError(f"unknown format {format!r}")
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    meta = _parse_header(lines[0])
    tx = ArrayConfig(meta["n_tx"], orientation=meta["tx_orientation"])
    rx = ArrayConfig(meta["n_rx"], orientation=meta["rx_orientation"])
    ct, cr = channel.dft_codebook(tx.num_elements), channel.dft_codebook(rx.num_elements)
    interval = meta["scene_interval_ms"]

    groups: dict = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        ep, sc, rid, pos, los, mpcs, gains = _parse_record(line.split(), lineno, meta["M"])
        if mpcs is not None:
            gains = channel.beam_gains(channel.channel_matrix(mpcs, tx, rx), ct, cr)
        scene = Scene(ep, sc, rid, pos, los, sc * interval, mpcs, gains)
        groups.setdefault(ep, {}).setdefault(rid, []).append((lineno, scene))

    episodes = []
    for ep_id in sorted(groups):
        receivers = []
        for rid in sorted(groups[ep_id]):
            entries = sorted(groups[ep_id][rid], key=lambda e: e[1].scene_id)
            for expected, (lineno, scene) in enumerate(entries):
                if scene.scene_id != expected:
                    raise ValidationError(
                        f"line {lineno}: episode {ep_id} receiver {rid} expected scene_id "
                        f"{expected}, got {scene.scene_id}"
                    )
            receivers.append([s for _, s in entries])
        lengths = {len(r) for r in receivers}
        if len(lengths) != 1:
            raise ValidationError(f"episode {ep_id}: receiver series lengths differ {sorted(lengths)}")
        episodes.append(Episode(ep_id, receivers, interval))
    logger.info("ingested %d episodes from %s", len(episodes), path)
    return Dataset(episodes, meta["n_tx"], meta["n_rx"], interval,
                   meta["tx_orientation"], meta["rx_orientation"])


def write_scene_records(ds: Dataset, path) -> None:
    """Emit ``ds`` so that :func:`ingest` reproduces it exactly (repr floats)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(
            f"{HEADER_TAG} n_tx={ds.n_tx} n_rx={ds.n_rx} scene_interval_ms={ds.scene_interval_ms!r} "
            f"M={ds.M} tx_orientation={ds.tx_orientation!r} rx_orientation={ds.rx_orientation!r}\n"
        )
        for ep in ds.episodes:
            for scene in ep.scenes():
                head = [scene.episode_id, scene.scene_id, scene.receiver_id,
                        *(repr(float(v)) for v in scene.rx_position), int(scene.los)]
                if scene.mpcs is not None:
                    body = ["mpc"]
                    for p in scene.mpcs:
                        body += [repr(float(p.gain.real)), repr(float(p.gain.imag)),
                                 repr(float(p.aod_az)), repr(float(p.aod_el)),
                                 repr(float(p.aoa_az)), repr(float(p.aoa_el))]
                else:
                    body = ["gains", *(repr(float(g)) for g in scene.gains)]
                fh.write(" ".join(str(t) for t in head + body) + "\n")


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    num_episodes: int = 200
    receivers_per_episode: int = 2
    scenes_per_episode: int = 28
    street_length: float = 80.0
    bs_position: tuple = (40.0, 0.0)
    bs_height: float = 10.0
    ue_height: float = 1.5
    lane_offset_range: tuple = (8.0, 25.0)
    speed_range: tuple = (10.0, 30.0)
    target_nlos_fraction: float = 0.1
    mean_blockage_scenes: float = 3.0
    nlos_paths: int = 3
    nlos_gain_penalty_db: float = 10.0
    scene_interval_ms: float = 80.0
    carrier_ghz: float = 28.0
    seed: int = 0

    def __post_init__(self):
        self.bs_position = tuple(self.bs_position)
        self.lane_offset_range = tuple(self.lane_offset_range)
        self.speed_range = tuple(self.speed_range)
        for name in ("num_episodes", "receivers_per_episode", "scenes_per_episode", "nlos_paths"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if not 0.0 <= self.target_nlos_fraction <= 1.0:
            raise InvalidInputError("target_nlos_fraction must lie in [0, 1]")
        if self.mean_blockage_scenes < 1.0:
            raise InvalidInputError("mean_blockage_scenes must be >= 1")
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise InvalidInputError("bad speed_range")
        if self.lane_offset_range[0] <= 0 or self.lane_offset_range[1] < self.lane_offset_range[0]:
            raise InvalidInputError("lane offsets must be positive (UEs in front of the BS)")
        if self.street_length <= 0 or self.scene_interval_ms <= 0:
            raise InvalidInputError("street_length and scene_interval_ms must be positive")


def _blockage_rates(f: float, mean_len: float) -> tuple[float, float]:
    """(enter, exit) probabilities of a two-state chain with stationary NLOS share ``f``."""
    if f <= 0.0:
        return 0.0, 1.0
    if f >= 1.0:
        return 1.0, 0.0
    exit_p = 1.0 / mean_len
    enter_p = f * exit_p / (1.0 - f)
    if enter_p > 1.0:
        enter_p, exit_p = 1.0, (1.0 - f) / f
    return enter_p, exit_p


def _angles(src, dst) -> tuple[float, float]:
    d = np.asarray(dst, dtype=float) - np.asarray(src, dtype=float)
    az = math.degrees(math.atan2(d[1], d[0]))
    el = math.degrees(math.atan2(d[2], math.hypot(d[0], d[1])))
    return az, el


def _path(gain: complex, bs, ue, first_hop, last_hop) -> MultipathComponent:
    aod_az, aod_el = _angles(bs, first_hop)
    aoa_az, aoa_el = _angles(ue, last_hop)
    return MultipathComponent(gain, aod_az, aod_el, aoa_az, aoa_el)


def synth_generate(cfg: SynthConfig, tx: ArrayConfig, rx: ArrayConfig) -> Dataset:
    """Straight-line vehicular drives past a street-side BS with blockage intervals.

    Every receiver drives at a constant random speed along a lane parallel to
    the street. The LOS path carries free-space amplitude ``1/d`` (unit power
    at 1 m). Blockage follows a two-state Markov chain whose intervals have a
    geometric length with mean ``mean_blockage_scenes``; while blocked, the
    LOS amplitude drops by ``nlos_gain_penalty_db`` and ``nlos_paths``
    single-bounce reflections off reflectors drawn at interval start are
    added.
    """
    rng = np.random.default_rng(cfg.seed)
    wavelength = SPEED_OF_LIGHT / (cfg.carrier_ghz * 1e9)
    ct, cr = channel.dft_codebook(tx.num_elements), channel.dft_codebook(rx.num_elements)
    bs = np.array([cfg.bs_position[0], cfg.bs_position[1], cfg.bs_height])
    dt = cfg.scene_interval_ms / 1000.0
    enter_p, exit_p = _blockage_rates(cfg.target_nlos_fraction, cfg.mean_blockage_scenes)
    penalty = 10.0 ** (-cfg.nlos_gain_penalty_db / 20.0)

    episodes = []
    for ep_id in range(cfg.num_episodes):
        receivers = []
        for rid in range(cfg.receivers_per_episode):
            x0 = rng.uniform(0.0, cfg.street_length)
            lane = bs[1] + rng.uniform(*cfg.lane_offset_range)
            heading = 1.0 if rng.random() < 0.5 else -1.0
            speed = rng.uniform(*cfg.speed_range)
            blocked = rng.random() < cfg.target_nlos_fraction
            reflectors = None
            scenes = []
            for s in range(cfg.scenes_per_episode):
                if s > 0:
                    blocked = (rng.random() >= exit_p) if blocked else (rng.random() < enter_p)
                if not blocked:
                    reflectors = None
                elif reflectors is None:
                    # buildings on the far side of the lane
                    rx_ = rng.uniform(bs[0] - cfg.street_length / 2, bs[0] + cfg.street_length / 2, cfg.nlos_paths)
                    ry_ = lane + rng.uniform(5.0, 40.0, cfg.nlos_paths)
                    rz_ = rng.uniform(0.0, cfg.bs_height, cfg.nlos_paths)
                    loss = 10.0 ** (-rng.uniform(3.0, 10.0, cfg.nlos_paths) / 20.0)
                    phase = rng.uniform(0.0, 2 * np.pi, cfg.nlos_paths)
                    reflectors = (np.stack([rx_, ry_, rz_], axis=1), loss, phase)

                ue = np.array([x0 + heading * speed * s * dt, lane, cfg.ue_height])
                d = float(np.linalg.norm(ue - bs))
                los_amp = (1.0 / d) * (penalty if blocked else 1.0)
                paths = [_path(los_amp * np.exp(-2j * np.pi * d / wavelength), bs, ue, ue, bs)]
                if blocked:
                    pts, loss, phase = reflectors
                    for pt, lo, ph in zip(pts, loss, phase):
                        length = float(np.linalg.norm(pt - bs) + np.linalg.norm(ue - pt))
                        g = lo / length * np.exp(1j * (ph - 2 * np.pi * length / wavelength))
                        paths.append(_path(g, bs, ue, pt, pt))
                H = channel.channel_matrix(paths, tx, rx)
                gains = channel.beam_gains(H, ct, cr)
                scenes.append(Scene(ep_id, s, rid, tuple(float(v) for v in ue), not blocked,
                                    s * cfg.scene_interval_ms, tuple(paths), gains))
            receivers.append(scenes)
        episodes.append(Episode(ep_id, receivers, cfg.scene_interval_ms))
    return Dataset(episodes, tx.num_elements, rx.num_elements, cfg.scene_interval_ms,
                   tx.orientation, rx.orientation)


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True)
class ScenarioStats:
    los_count: int
    nlos_count: int
    mafd: float
    beam_gain_variance_db: float

    @property
    def total(self) -> int:
        return self.los_count + self.nlos_count


def stats(ds, n_total: int | None = None) -> ScenarioStats:
    """LOS/NLOS counts, MAFD of best-beam sequences, and variance of best-beam gain (dB).

    MAFD averages over every (episode, receiver) series.
    """
    if n_total is None:
        n_total = ds.M
    series = list(iter_series(ds))
    if not series:
        raise ValidationError("dataset has no scenes")
    los = int(sum(s.los.sum() for s in series))
    total = sum(len(s.los) for s in series)
    best_gain = np.concatenate([s.gains.max(axis=1) for s in series])
    with np.errstate(divide="ignore"):
        best_db = 20.0 * np.log10(best_gain)
    return ScenarioStats(
        los_count=los,
        nlos_count=total - los,
        mafd=mafd([s.best for s in series], n_total),
        beam_gain_variance_db=float(np.var(best_db)),
    )


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Episode-level train/test partition."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidInputError("test_fraction must lie in (0, 1)")
    n = len(ds.episodes)
    if n < 2:
        raise InvalidInputError("need at least 2 episodes to split")
    n_test = min(max(1, int(round(n * test_fraction))), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [ep for i, ep in enumerate(ds.episodes) if i not in test_idx]
    test = [ep for i, ep in enumerate(ds.episodes) if i in test_idx]
    return ds.with_episodes(train), ds.with_episodes(test)
