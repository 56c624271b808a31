"""Experiment pipeline: data -> stats -> train -> eval -> report.

Every stage reads what the earlier ones persisted under the output
directory, so stages can be run one at a time:

    dataset.txt                 scene-records (synth or ingest)
    split.json                  train/test episode ids
    stats.json                  ScenarioStats of the full / train / test sets
    normalizer.json             RSRP normalization fitted on the training split
    checkpoints/{head}.npz      trained DeepBT-C / DeepBT-R parameters
    training.json               per-head loss curves
    tracks/{head}_p{p}.npz      concatenated TrackRecords of the test series
    tracks/persistence.npz      persistence baseline on the same slots
    report.json                 metrics recomputed from tracks/
    plots/*.csv                 tables behind the figures

Seeds: each stage draws from ``SeedSequence([master_seed, crc32(stage)])``
with stage names ``synth``, ``split``, ``init-{head}``, ``train-{head}`` and
``prefilter``; per-series prefilter noise appends ``(episode, receiver)``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import channel, dataset, metrics
from . import model as mdl
from . import tracking as tr
from .errors import InvalidInputError, StageError, ValidationError

logger = logging.getLogger(__name__)

STAGES = ("data", "stats", "train", "eval", "report")
HEADS = mdl.HEADS


def sub_seed(master: int, stage: str, *extra: int) -> int:
    ss = np.random.SeedSequence([int(master), zlib.crc32(stage.encode()), *map(int, extra)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    synth: dataset.SynthConfig | None = field(default_factory=dataset.SynthConfig)
    ingest_path: str | None = None
    tx: channel.ArrayConfig = field(default_factory=lambda: channel.ArrayConfig(16, orientation=90.0))
    rx: channel.ArrayConfig = field(default_factory=lambda: channel.ArrayConfig(1, orientation=-90.0))
    window: tr.WindowConfig = field(default_factory=lambda: tr.WindowConfig(rsrp_normalization="zscore_db"))
    hidden_dims: tuple = (128, 128)
    dropout_rate: float = 0.2
    train: mdl.TrainConfig = field(default_factory=mdl.TrainConfig)
    schedules: tuple = (0, 1, 2, 3)
    k_values: tuple = (1, 5, 10)
    prefilter: tr.PrefilterConfig = field(default_factory=tr.PrefilterConfig)
    test_fraction: float = 0.2
    workers: int = 1

    def validate(self, M: int | None = None) -> None:
        if not self.schedules:
            raise ValidationError("schedule list is empty")
        if any(p < 0 for p in self.schedules) or len(set(self.schedules)) != len(self.schedules):
            raise ValidationError("schedules must be distinct non-negative integers")
        if not self.k_values or list(self.k_values) != sorted(set(self.k_values)) or self.k_values[0] < 1:
            raise ValidationError("k_values must be positive and strictly ascending")
        M = M or self.tx.num_elements * self.rx.num_elements
        if self.k_values[-1] > M:
            raise ValidationError(f"k={self.k_values[-1]} exceeds M={M}")
        if (self.synth is None) == (self.ingest_path is None):
            raise ValidationError("exactly one of scenario.synth / scenario.ingest must be set")
        if not 0 < self.test_fraction < 1:
            raise ValidationError("test_fraction must lie in (0, 1)")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "scenario": ({"synth": _plain(asdict(self.synth))} if self.synth is not None
                         else {"ingest": self.ingest_path}),
            "arrays": {"tx": _plain(asdict(self.tx)), "rx": _plain(asdict(self.rx))},
            "window": asdict(self.window),
            "model": {"hidden_dims": list(self.hidden_dims), "dropout_rate": self.dropout_rate},
            "train": asdict(self.train),
            "schedules": list(self.schedules),
            "k_values": list(self.k_values),
            "prefilter": _plain(asdict(self.prefilter)),
            "test_fraction": self.test_fraction,
            "workers": self.workers,
        }

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict | None, section: str):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{section}: {exc}") from None


_TOP_KEYS = {"seed", "out", "scenario", "arrays", "window", "model", "train", "schedules",
             "k_values", "prefilter", "test_fraction", "workers"}


def load_config(source=None, **overrides) -> ExperimentConfig:
    """Build a config from a YAML file path, a mapping, or nothing (all defaults).

    Keyword overrides (``seed``, ``out``) win over the document.
    """
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        with open(source) as fh:
            doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValidationError("config must be a key-value mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig()
    for key in ("seed", "out", "test_fraction", "workers"):
        if key in doc:
            setattr(cfg, key, doc[key])
    scenario = doc.get("scenario") or {}
    if "ingest" in scenario:
        cfg.synth, cfg.ingest_path = None, str(scenario["ingest"])
        if "synth" in scenario:
            raise ValidationError("scenario has both synth and ingest")
    elif "synth" in scenario:
        base = asdict(cfg.synth)
        base.update(scenario["synth"] or {})
        cfg.synth = _build(dataset.SynthConfig, base, "scenario.synth")
    arrays = doc.get("arrays") or {}
    for side in ("tx", "rx"):
        if side in arrays:
            base = asdict(getattr(cfg, side))
            base.update(arrays[side] or {})
            setattr(cfg, side, _build(channel.ArrayConfig, base, f"arrays.{side}"))
    if "window" in doc:
        base = asdict(cfg.window)
        base.update(doc["window"] or {})
        cfg.window = _build(tr.WindowConfig, base, "window")
    model_doc = dict(doc.get("model") or {})
    unknown = set(model_doc) - {"hidden_dims", "dropout_rate"}
    if unknown:
        raise ValidationError(f"unknown keys in model: {sorted(unknown)}")
    cfg.hidden_dims = tuple(model_doc.get("hidden_dims", cfg.hidden_dims))
    cfg.dropout_rate = float(model_doc.get("dropout_rate", cfg.dropout_rate))
    if "train" in doc:
        cfg.train = _build(mdl.TrainConfig, doc["train"], "train")
    if "schedules" in doc:
        cfg.schedules = tuple(int(p) for p in doc["schedules"] or ())
    if "k_values" in doc:
        cfg.k_values = tuple(int(k) for k in doc["k_values"] or ())
    if "prefilter" in doc:
        cfg.prefilter = _build(tr.PrefilterConfig, doc["prefilter"], "prefilter")
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


class Pipeline:
    """Stage runner bound to one config and output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.runtime: dict = {}

    # -- persisted artifacts
    @property
    def dataset_path(self) -> Path:
        return self.out / "dataset.txt"

    def track_path(self, head: str, p: int) -> Path:
        return self.out / "tracks" / f"{head}_p{p}.npz"

    def load_dataset(self) -> dataset.Dataset:
        if not self.dataset_path.exists():
            raise ValidationError(f"{self.dataset_path} missing; run the data stage first")
        return dataset.ingest(self.dataset_path)

    def load_split(self, ds):
        ids = _read_json(self.out / "split.json")
        by_id = {ep.id: ep for ep in ds}
        return (ds.with_episodes(by_id[i] for i in ids["train"]),
                ds.with_episodes(by_id[i] for i in ids["test"]))

    def load_normalizer(self) -> tr.Normalizer:
        return tr.Normalizer(**_read_json(self.out / "normalizer.json"))

    def stage(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.runtime[name] = time.perf_counter() - t0
        return result

    # -- stages
    def synth(self) -> dataset.Dataset:
        cfg = self.cfg
        if cfg.synth is None:
            raise ValidationError("config has no synth scenario")
        synth_cfg = replace(cfg.synth, seed=sub_seed(cfg.seed, "synth"))
        ds = dataset.synth_generate(synth_cfg, cfg.tx, cfg.rx)
        dataset.write_scene_records(ds, self.dataset_path)
        return ds

    def ingest(self, path=None) -> dataset.Dataset:
        ds = dataset.ingest(path or self.cfg.ingest_path)
        dataset.write_scene_records(ds, self.dataset_path)
        return ds

    def data(self) -> dataset.Dataset:
        ds = self.synth() if self.cfg.synth is not None else self.ingest()
        self.cfg.validate(ds.M)
        train, test = dataset.split(ds, self.cfg.test_fraction, sub_seed(self.cfg.seed, "split"))
        _write_json(self.out / "split.json",
                    {"train": [ep.id for ep in train], "test": [ep.id for ep in test]})
        return ds

    def stats(self) -> dict:
        ds = self.load_dataset()
        train, test = self.load_split(ds)
        out = {name: _stats_dict(part) for name, part in (("all", ds), ("train", train), ("test", test))}
        _write_json(self.out / "stats.json", out)
        return out

    def train(self) -> dict:
        cfg = self.cfg
        ds = self.load_dataset()
        train, _ = self.load_split(ds)
        series = list(dataset.iter_series(train))
        norm = tr.Normalizer.fit([s.gains for s in series], cfg.window.rsrp_normalization)
        _write_json(self.out / "normalizer.json", norm.to_dict())
        windows = tr.WindowSet.concat(tr.build_windows(s.gains, cfg.window, norm) for s in series)
        curves = {}
        for head in HEADS:
            spec = mdl.ModelSpec(cfg.window.feature_dim(ds.M), ds.M, cfg.hidden_dims, cfg.dropout_rate, head)
            params = mdl.init_params(spec, sub_seed(cfg.seed, f"init-{head}"))
            tcfg = replace(cfg.train, seed=sub_seed(cfg.seed, f"train-{head}"))
            params, curve = mdl.train(params, spec, tcfg, windows.X, windows.targets(head))
            mdl.save_checkpoint(self.out / "checkpoints" / f"{head}.npz", params, spec,
                                seed=tcfg.seed, epochs=tcfg.epochs)
            curves[head] = curve
            logger.info("trained %s head: loss %.4f -> %.4f", head, curve[0] if curve else float("nan"),
                        curve[-1] if curve else float("nan"))
        _write_json(self.out / "training.json", {"num_windows": int(windows.X.shape[0]), "loss_curves": curves})
        return curves

    def _allowed(self, ds, s: dataset.Series):
        pcfg = self.cfg.prefilter
        if not pcfg.enabled:
            return None
        bs = pcfg.bs_position
        if bs is None:
            if self.cfg.synth is None:
                raise ValidationError("prefilter needs prefilter.bs_position for ingested data")
            bs = self.cfg.synth.bs_position
        boresights = channel.codebook_boresights(ds.n_tx, ds.tx_orientation)
        rng = sub_seed(self.cfg.seed, "prefilter", s.episode_id, s.receiver_id)
        return tr.prefilter_mask(s.positions, pcfg, bs, boresights, ds.n_rx, rng=rng)

    def eval(self) -> dict:
        cfg = self.cfg
        ds = self.load_dataset()
        _, test = self.load_split(ds)
        norm = self.load_normalizer()
        series = list(dataset.iter_series(test))
        masks = [self._allowed(ds, s) for s in series]
        ids = np.concatenate([np.tile([s.episode_id, s.receiver_id], (s.gains.shape[0] - cfg.window.window_len, 1))
                              for s in series])
        written = {}
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for head in HEADS:
                params, spec, _ = mdl.load_checkpoint(self.out / "checkpoints" / f"{head}.npz")
                predictor = tr.ModelPredictor(params, spec)
                for p in cfg.schedules:
                    sched = tr.Schedule(p, ds.scene_interval_ms)
                    # map() keeps (episode, receiver) order regardless of completion order
                    recs = list(pool.map(lambda a: tr.rollout(predictor, sched, a[0].gains, cfg.window, norm, a[1]),
                                         zip(series, masks)))
                    save_track(self.track_path(head, p), tr.TrackRecord.concat(recs), ids)
                    written[(head, p)] = self.track_path(head, p)
        W = cfg.window.window_len
        pred = np.concatenate([tr.persistence_baseline(s.best)[W - 1:] for s in series])
        gains = np.concatenate([s.gains[W:] for s in series])
        np.savez(self.out / "tracks" / "persistence.npz", predicted=pred, true_gains=gains, series=ids)
        return written

    def track(self, head: str = "regression", p: int = 2, episode: int | None = None,
              receiver: int | None = None) -> Path:
        """Per-slot trace of a single test series as CSV."""
        ds = self.load_dataset()
        _, test = self.load_split(ds)
        series = list(dataset.iter_series(test))
        if episode is not None:
            series = [s for s in series if s.episode_id == episode
                      and (receiver is None or s.receiver_id == receiver)]
        if not series:
            raise InvalidInputError("no matching test series")
        s = series[0]
        params, spec, _ = mdl.load_checkpoint(self.out / "checkpoints" / f"{head}.npz")
        rec = tr.rollout(tr.ModelPredictor(params, spec), tr.Schedule(p, ds.scene_interval_ms),
                         s.gains, self.cfg.window, self.load_normalizer(), self._allowed(ds, s))
        path = self.out / f"trace_ep{s.episode_id}_rx{s.receiver_id}_{head}_p{p}.csv"
        chosen_pow, best_pow = rec.power_gains()
        with np.errstate(divide="ignore"):
            chosen_db, best_db = 10 * np.log10(chosen_pow), 10 * np.log10(best_pow)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "kind", "window_provenance", "chosen_beam", "true_best_beam",
                        "chosen_gain_db", "best_gain_db", "los"])
            for j, slot in enumerate(rec.slots):
                w.writerow([int(slot), "M" if rec.measured[j] else "P",
                            "".join("M" if m else "P" for m in rec.window_measured[j]),
                            int(rec.chosen[j]), int(rec.true_best[j]),
                            repr(float(chosen_db[j])), repr(float(best_db[j])), int(s.los[slot])])
        return path

    def report(self) -> dict:
        cfg = self.cfg
        stats = _read_json(self.out / "stats.json")
        report = build_report(self.out, cfg, stats, self.runtime)
        _write_json(self.out / "report.json", report)
        emit_plot_data(report, self.out / "plots")
        return report

    def run(self, until: str = "report") -> dict | None:
        if until not in STAGES:
            raise InvalidInputError(f"unknown stage {until!r}; choose from {STAGES}")
        self.out.mkdir(parents=True, exist_ok=True)
        _write_json(self.out / "config.json", self.cfg.to_dict())
        result = None
        for name in STAGES[:STAGES.index(until) + 1]:
            result = self.stage(name, getattr(self, name))
        return result


def _stats_dict(ds) -> dict:
    st = dataset.stats(ds)
    return {"los_count": st.los_count, "nlos_count": st.nlos_count, "total": st.total,
            "mafd": st.mafd, "beam_gain_variance_db": st.beam_gain_variance_db, "M": ds.M}


def save_track(path: Path, rec: tr.TrackRecord, series_ids) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(slots=rec.slots, measured=rec.measured, window_slots=rec.window_slots,
                  window_measured=rec.window_measured, outputs=rec.outputs, true_gains=rec.true_gains,
                  series=np.asarray(series_ids), head=np.array(rec.head), p=np.array(rec.p))
    if rec.allowed is not None:
        arrays["allowed"] = rec.allowed
    np.savez(path, **arrays)


def load_track(path) -> tr.TrackRecord:
    with np.load(path, allow_pickle=False) as d:
        return tr.TrackRecord(
            head=str(d["head"]), p=int(d["p"]), slots=d["slots"], measured=d["measured"],
            window_slots=d["window_slots"], window_measured=d["window_measured"],
            outputs=d["outputs"], true_gains=d["true_gains"],
            allowed=d["allowed"] if "allowed" in d.files else None,
        )


# ---------------------------------------------------------------- report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "config_digest", "seed", "k_values", "dataset", "results", "baseline", "runtime_s"],
    "properties": {
        "schema": {"const": "beamtrack-report/1"},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": "integer"},
        "k_values": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "dataset": {"type": "object", "required": ["all", "train", "test"]},
        "results": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["head", "p", "n_measured", "n_full", "mor", "topk", "throughput_ratio"],
                "properties": {
                    "head": {"enum": list(HEADS)},
                    "p": {"type": "integer", "minimum": 0},
                    "n_measured": {"type": "integer"},
                    "n_full": {"type": "integer"},
                    "mor": {"type": "number", "minimum": 0, "maximum": 100},
                    "topk": {"type": "object", "additionalProperties": {"type": "number"}},
                    "throughput_ratio": {"type": "number"},
                },
            },
        },
        "baseline": {"type": "object", "required": ["name", "top1", "throughput_ratio", "n"]},
        "runtime_s": {"type": "object"},
    },
}


def metrics_from_track(rec: tr.TrackRecord, k_values) -> dict:
    return {
        "head": rec.head,
        "p": int(rec.p),
        "n_measured": rec.n_measured,
        "n_full": rec.n_full,
        "mor": metrics.mor(rec.n_measured, rec.n_full),
        "topk": {str(k): rec.topk(k).accuracy for k in k_values},
        "throughput_ratio": rec.throughput_ratio().ratio,
    }


def persistence_metrics(path) -> dict:
    with np.load(path, allow_pickle=False) as d:
        pred, gains = d["predicted"], d["true_gains"]
    power = gains ** 2
    rows = np.arange(len(pred))
    return {
        "name": "persistence",
        "top1": float(np.mean(pred == np.argmax(gains, axis=1))),
        "throughput_ratio": metrics.throughput_ratio(power[rows, pred], power.max(axis=1)).ratio,
        "n": int(len(pred)),
    }


def build_report(out: Path, cfg: ExperimentConfig, stats: dict, runtime: dict) -> dict:
    """Assemble the report purely from persisted TrackRecords."""
    results = []
    for head in HEADS:
        for p in cfg.schedules:
            results.append(metrics_from_track(load_track(Path(out) / "tracks" / f"{head}_p{p}.npz"), cfg.k_values))
    report = {
        "schema": "beamtrack-report/1",
        "config_digest": cfg.digest(),
        "seed": int(cfg.seed),
        "k_values": list(cfg.k_values),
        "dataset": stats,
        "results": results,
        "baseline": persistence_metrics(Path(out) / "tracks" / "persistence.npz"),
        "runtime_s": {k: round(v, 3) for k, v in runtime.items()},
    }
    validate_report(report)
    return report


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"report does not match schema: {exc.message}") from None


def emit_plot_data(report: dict, out_dir) -> dict:
    """Write the CSV tables behind the figures; values are copied, not recomputed."""
    validate_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "topk": out_dir / "topk_vs_k.csv",
        "throughput": out_dir / "throughput_ratio.csv",
        "mafd": out_dir / "mafd.csv",
    }
    with paths["topk"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "p", "k", "accuracy"])
        for r in report["results"]:
            for k in report["k_values"]:
                w.writerow([r["head"], r["p"], k, repr(r["topk"][str(k)])])
    with paths["throughput"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "p", "mor_percent", "throughput_ratio"])
        for r in report["results"]:
            w.writerow([r["head"], r["p"], repr(r["mor"]), repr(r["throughput_ratio"])])
        b = report["baseline"]
        w.writerow([b["name"], 0, repr(0.0), repr(b["throughput_ratio"])])
    with paths["mafd"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "mafd", "los_count", "nlos_count", "beam_gain_variance_db"])
        for name, st in report["dataset"].items():
            w.writerow([name, repr(st["mafd"]), st["los_count"], st["nlos_count"], repr(st["beam_gain_variance_db"])])
    return paths


def run(config: ExperimentConfig) -> dict:
    """Full pipeline; returns the report."""
    return Pipeline(config).run("report")
