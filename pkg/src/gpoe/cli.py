"""Command line entry point: ``gpoe train|predict|benchmark``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import GPoEError, InputError
from .experts import Strategy, train_ensemble
from .fusion import Rule, fuse
from .harness import (
    Standardizer,
    emit_results,
    load_config,
    load_csv,
    load_ensemble,
    run_experiment,
    save_ensemble,
    write_csv,
)

log = logging.getLogger("gpoe")


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--parallelism", type=int, default=None, help="worker processes")
    p.add_argument("--output", default=None, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpoe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="build and persist one ensemble")
    _common(p)
    p.add_argument("--strategy", default=None,
                   help="strategy to train (default: first strategy in the config)")

    p = sub.add_parser("predict", help="fused predictions for a CSV of inputs")
    _common(p, config_required=False)
    p.add_argument("--ensemble", required=True, help="ensemble file written by 'train'")
    p.add_argument("--input", required=True, help="CSV of input points")
    p.add_argument("--rule", default="gpoe", help="fusion rule (default: gpoe)")

    p = sub.add_parser("benchmark", help="run the strategy x rule grid")
    _common(p)
    p.add_argument("--no-figures", action="store_true", help="skip rendering figures")
    return parser


def _overrides(args):
    return {"seed": args.seed, "parallelism": args.parallelism, "output": args.output}


def cmd_train(args) -> int:
    config = load_config(args.config, **_overrides(args))
    if config.train_path is None or not Path(config.train_path).is_file():
        raise InputError(f"train_path {config.train_path!r} does not name an existing file")
    strategy = Strategy.parse(args.strategy) if args.strategy else config.strategies[0]
    X, y, names = load_csv(config.train_path, config.target_column, return_header=True)
    scaler = Standardizer.fit(X, y)
    ensemble = train_ensemble(
        (scaler.transform_inputs(X), scaler.transform_targets(y)),
        config.ensemble_config(strategy),
        config.parallelism,
    )
    out = Path(args.output or f"ensemble_{strategy.value}.npz")
    save_ensemble(out, ensemble, scaler, names, config.target_column)
    log.info("trained %d experts (%d failed) -> %s", len(ensemble), len(ensemble.failures), out)
    print(out)
    return 0


def cmd_predict(args) -> int:
    ensemble, scaler, meta = load_ensemble(args.ensemble)
    rule = Rule.parse(args.rule)
    X, _, header = load_csv(args.input, None, return_header=True)
    names = meta.get("feature_names")
    if names:
        missing = [n for n in names if n not in header]
        if missing:
            raise InputError(f"{args.input}: missing input columns {missing}")
        X = X[:, [header.index(n) for n in names]]
    if scaler is not None:
        X = scaler.transform_inputs(X)
    fused = fuse(ensemble, X, rule)
    mean = np.asarray(fused.mean, dtype=float)
    var = np.asarray(fused.variance, dtype=float)
    if scaler is not None:
        mean = scaler.inverse_targets(mean)
        var = scaler.inverse_variance(var)
    out = args.output or "predictions.csv"
    write_csv(out, {"mean": mean, "variance": var, "rule": [rule.value] * mean.shape[0]})
    print(out)
    return 0


def cmd_benchmark(args) -> int:
    config = load_config(args.config, **_overrides(args))
    results = run_experiment(config)
    written = emit_results(results, config.output, figures=not args.no_figures)
    print(Path(written["table"]).read_text())
    return 0 if results["records"] else 1


_COMMANDS = {"train": cmd_train, "predict": cmd_predict, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except GPoEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
