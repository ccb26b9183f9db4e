#!/usr/bin/env python3
"""The reference 4-1 experiment: fine-tuning collapse versus the full method.

Runs two configurations of the same seeded schedule — plain fine-tuning
and the full pipeline (pseudo labels + unknown modelling + prototype
matching + feature preserving + relevance consistency) — then compares
their grouped mIoU. Pass --fast for a coarse but quicker variant.
"""

import argparse
import dataclasses
import json
import pathlib
import tempfile

from contseg.harness import compare_runs, format_comparison, run_experiment, toy_config

parser = argparse.ArgumentParser()
parser.add_argument("--fast", action="store_true", help="fewer epochs per step")
parser.add_argument("--out", default=None, help="output root (default: temp dir)")
args = parser.parse_args()

out_root = pathlib.Path(args.out) if args.out else pathlib.Path(tempfile.mkdtemp())
epochs = (12, 12) if args.fast else None

full = toy_config(name="full")
if epochs:
    full = dataclasses.replace(full, epochs_per_step=epochs)
ft_train = dataclasses.replace(
    full.train,
    use_pseudo_labels=False,
    use_unknown_class=False,
    use_prototype_matching=False,
    use_feature_preserving=False,
    use_relevance_consistency=False,
)
ft = dataclasses.replace(full, name="fine-tuning", train=ft_train)

run_dirs = {}
for cfg in (ft, full):
    run_dirs[cfg.name] = run_experiment(cfg, out_root / cfg.name)
    metrics = json.loads((run_dirs[cfg.name] / "point_000" / "metrics.json").read_text())
    print(f"== {cfg.name}")
    for step in metrics["steps"]:
        ev = step["evaluation"]
        incre = "-" if ev["miou_incre"] is None else f"{ev['miou_incre']:.3f}"
        print(f"  step {step['step_index']}: n={step['n_train']:3d} "
              f"old={ev['miou_init']:.3f} new={incre} all={ev['miou_all']:.3f} "
              f"provenance={step['provenance']}")

report = compare_runs([run_dirs["fine-tuning"], run_dirs["full"]])
print()
print(format_comparison(report))
print(f"runs written under {out_root}")
