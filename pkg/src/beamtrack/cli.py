"""Command-line entry point.

    beamtrack run     --config exp.yaml --out runs/a [--seed N] [--stage eval]
    beamtrack synth   --config exp.yaml --out runs/a
    beamtrack ingest  --input scenes.txt --out runs/a
    beamtrack stats | train | eval | report  --out runs/a
    beamtrack track   --out runs/a --head regression --p 2 [--episode E --receiver R]

Exit status is 0 on success and 2 on failure, with the failing stage named
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import BeamtrackError, StageError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="beamtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the pipeline")
    run.add_argument("--stage", choices=harness.STAGES, default="report", help="last stage to run")
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset and split it")
    ingest = sub.add_parser("ingest", parents=[common], help="validate and import scene records")
    ingest.add_argument("--input", required=False, help="scene-records file (else scenario.ingest)")
    for name, text in (("stats", "dataset statistics"), ("train", "train both heads"),
                       ("eval", "roll out every schedule on the test split"),
                       ("report", "build report.json and plot tables")):
        sub.add_parser(name, parents=[common], help=text)
    track = sub.add_parser("track", parents=[common], help="per-slot trace of one test series")
    track.add_argument("--head", choices=harness.HEADS, default="regression")
    track.add_argument("--p", type=int, default=2, help="predictions per measurement")
    track.add_argument("--episode", type=int)
    track.add_argument("--receiver", type=int)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = harness.load_config(args.config, seed=args.seed, out=args.out)
        pipe = harness.Pipeline(cfg)
        pipe.out.mkdir(parents=True, exist_ok=True)
        if stage == "run":
            result = pipe.run(args.stage)
        elif stage == "synth":
            result = pipe.stage("synth", pipe.data)
        elif stage == "ingest":
            if args.input:
                cfg.synth, cfg.ingest_path = None, args.input
            result = pipe.stage("ingest", pipe.data)
        elif stage == "track":
            result = pipe.stage("track", pipe.track, args.head, args.p, args.episode, args.receiver)
        else:
            result = pipe.stage(stage, getattr(pipe, stage))
    except StageError as exc:
        print(f"beamtrack: {exc}", file=sys.stderr)
        return 2
    except BeamtrackError as exc:
        print(f"beamtrack: stage '{stage}' failed: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, dict) and "results" in result:
        for r in result["results"]:
            topk = " ".join(f"top{k}={v:.3f}" for k, v in r["topk"].items())
            print(f"{r['head']:<14} p={r['p']} MOR={r['mor']:5.1f}% {topk} TR={r['throughput_ratio']:.3f}")
        b = result["baseline"]
        print(f"{'persistence':<14} top1={b['top1']:.3f} TR={b['throughput_ratio']:.3f}")
    elif stage == "stats":
        print(json.dumps(result, indent=2))
    elif result is not None and not isinstance(result, dict):
        print(result if not hasattr(result, "episodes") else f"{len(result)} episodes -> {pipe.dataset_path}")
    print(f"done: {stage} -> {pipe.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
