"""Command-line entry point: ``apovi <command> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .errors import DataError, TrainingAborted
from .experiments import ExperimentConfig, run_elbo_table, run_image_complete, run_regress_1d, run_train

COMMANDS = {
    "train": ("train", run_train),
    "elbo-table": ("elbo_table", run_elbo_table),
    "regress-1d": ("regress_1d", run_regress_1d),
    "complete-image": ("image_complete", run_image_complete),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--model")
    p.add_argument("--meta-size", type=int)
    p.add_argument("--objective", choices=["elbo", "npml", "npvi"])
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--repetitions", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apovi", description="Amortised BNN and neural-process experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _common(sub.add_parser(name))
    insp = sub.add_parser("inspect-checkpoint")
    insp.add_argument("path")
    return parser


def effective_config(experiment: str, args: argparse.Namespace) -> ExperimentConfig:
    d: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            d = json.load(fh)
    d["experiment"] = experiment
    overrides = {"seed": args.seed, "out_dir": args.out, "model": args.model,
                 "meta_size": args.meta_size, "objective": args.objective, "repetitions": args.repetitions}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.epochs is not None:
        train = dict(d.get("train", {}))
        train["max_epochs"] = args.epochs
        train["es_start"] = min(train.get("es_start", 100), args.epochs)
        d["train"] = train
    if d.get("model") in ("cnp", "convcnp") and "objective" not in d:
        d["objective"] = "npml"
    if experiment == "image_complete" and "objective" not in d:
        d["objective"] = "npml"
    return ExperimentConfig.from_dict(d)


def _inspect(path: str) -> int:
    model_id, arrays = load_checkpoint(path)
    print(f"model: {model_id}")
    total = 0
    for name, a in arrays.items():
        print(f"  {name:40s} {str(a.shape):16s} mean {a.mean():+.4e}")
        total += a.size
    print(f"{len(arrays)} tensors, {total} values")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "inspect-checkpoint":
            return _inspect(args.path)
        experiment, fn = COMMANDS[args.command]
        cfg = effective_config(experiment, args)
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        result = fn(cfg)
    except (ValueError, DataError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if hasattr(result, "repetition_means"):
        print(f"{result.metric}: {result.mean:.4f} +- {result.sd:.4f} over {len(result.repetition_means())} repetitions")
    elif isinstance(result, dict) and "run" in result:
        run = result["run"]
        final = run.raw[-1] if run.raw else float("nan")
        print(f"trained {len(run.raw)} epochs, final objective {final:.4f}, stop epoch {run.stop_epoch}")
        if "mean" in result:
            print(f"predictions written for {np.size(result['x'])} grid points")
    print(f"outputs in {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
