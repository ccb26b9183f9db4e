"""Command-line entry point: dataset generation, runs, sweeps, comparison, checks."""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from . import checks as checks_mod
from . import harness
from .data import generate_dataset, save_dataset
from .errors import ConfigurationError, ContsegError


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        raw = json.loads(pathlib.Path(args.config).read_text())
    else:
        raw = harness.toy_config().to_dict()
    if args.set:
        raw = harness.apply_overrides(raw, args.set)
    config = harness.ExperimentConfig.from_dict(raw)
    config.validate()
    return config


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON (default: built-in toy 4-1)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY.PATH=VALUE",
        help="override any config field, e.g. --set train.epochs=5",
    )


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    spec = config.dataset.scene_spec()
    split = args.split
    if split == "val":
        seed = config.dataset.val_seed
        spec = config.dataset.scene_spec(seed if seed is not None else config.dataset.seed + 1000)
        count = config.dataset.val_count
    else:
        count = config.dataset.train_count
    images = generate_dataset(spec, count)
    out = save_dataset(args.out, images, spec)
    print(f"wrote {len(images)} {split} images to {out}")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    points = harness.enumerate_points(config)
    if len(points) > 1:
        raise ConfigurationError(
            f"config expands to {len(points)} sweep points; use the sweep subcommand"
        )
    return _execute(config, args.out)


def cmd_sweep(args) -> int:
    return _execute(_load_config(args), args.out)


def _execute(config: harness.ExperimentConfig, out: str) -> int:
    run_dir = harness.run_experiment(config, out)
    print((run_dir / "summary.txt").read_text(), end="")
    print(f"run directory: {run_dir}")
    return 0


def cmd_compare(args) -> int:
    report = harness.compare_runs(args.runs, max_regression=args.max_regression)
    print(harness.format_comparison(report), end="")
    if args.max_regression is not None and report["regressions"]:
        return 2
    return 0


def cmd_check(args) -> int:
    results = checks_mod.run_all(quick=args.quick)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contseg",
        description="continual semantic segmentation experiments on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a dataset to a directory")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=["train", "val"], default="train")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="execute a single-point experiment")
    _add_config_args(p)
    p.add_argument("--out", default="runs", help="root directory for run outputs")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="execute every sweep point of a config")
    _add_config_args(p)
    p.add_argument("--out", default="runs", help="root directory for run outputs")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("compare", help="compare two or more finished runs")
    p.add_argument("runs", nargs="+", help="run directories (first is the baseline)")
    p.add_argument("--max-regression", type=float, default=None,
                   help="flag mIoU drops beyond this amount and exit nonzero")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("check", help="run the oracle/property battery")
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")
    p.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ContsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
