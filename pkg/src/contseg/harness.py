"""Config-driven experiment runner: schedules, sweeps, reports, comparison.

An experiment config fully determines a run: the synthetic dataset, the
incremental schedule, network architecture, trainer hyper-parameters and
optional sweep axes (data ratios, class orders, training seeds).  Every
output embeds a hash of the resolved config, and metric JSON files carry
no timestamps so a repeated run reproduces them byte for byte (timings
live in a separate meta file).
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import pathlib
from typing import Any, Sequence

import torch

from .data import (
    SyntheticSceneSpec,
    TaskSchedule,
    default_universe,
    generate_dataset,
)
from .errors import ConfigurationError, ContractError
from .metrics import class_order_summary
from .net import NetConfig
from .trainer import StepConfig, StepReport, run_schedule


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    """Synthetic dataset recipe plus train/validation sizes."""

    height: int = 32
    width: int = 32
    num_classes: int = 5
    shapes_per_image: tuple[int, int] = (1, 3)
    noise: float = 0.05
    seed: int = 7
    train_count: int = 64
    val_count: int = 32
    val_seed: int | None = None  # None: seed + 1000

    def scene_spec(self, seed: int | None = None) -> SyntheticSceneSpec:
        return SyntheticSceneSpec(
            height=self.height,
            width=self.width,
            classes=default_universe(self.num_classes),
            shapes_per_image=tuple(self.shapes_per_image),
            noise=self.noise,
            seed=self.seed if seed is None else seed,
        )

    def build(self) -> tuple[list, list]:
        train = generate_dataset(self.scene_spec(), self.train_count)
        val_seed = self.val_seed if self.val_seed is not None else self.seed + 1000
        val = generate_dataset(self.scene_spec(val_seed), self.val_count)
        return train, val


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    """Optional sweep axes; None leaves the base config untouched."""

    data_ratios: tuple[float, ...] | None = None
    class_orders: tuple[tuple[tuple[int, ...], ...], ...] | None = None
    seeds: tuple[int, ...] | None = None


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    name: str = "toy"
    dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    schedule_steps: tuple[tuple[int, ...], ...] = ((1, 2, 3, 4), (5,))
    protocol: str = "overlapped"
    data_ratio: float = 1.0
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    train: StepConfig = dataclasses.field(default_factory=StepConfig)
    epochs_per_step: tuple[int, ...] | None = None
    sweep: SweepConfig = dataclasses.field(default_factory=SweepConfig)
    save_checkpoints: bool = False

    def validate(self) -> None:
        self.schedule(self.schedule_steps, self.data_ratio).validate()
        self.net.validate()
        self.train.validate()
        universe = set(range(1, self.dataset.num_classes + 1))
        flat = {c for group in self.schedule_steps for c in group}
        if flat != universe:
            raise ConfigurationError(
                f"schedule classes {sorted(flat)} must cover the dataset universe "
                f"{sorted(universe)}"
            )
        if self.epochs_per_step is not None and len(self.epochs_per_step) != len(
            self.schedule_steps
        ):
            raise ConfigurationError("epochs_per_step must match the number of steps")
        if self.sweep.class_orders is not None:
            shape = [len(g) for g in self.schedule_steps]
            for order in self.sweep.class_orders:
                if [len(g) for g in order] != shape:
                    raise ConfigurationError(
                        f"class order {order} does not match schedule shape {shape}"
                    )
                if {c for g in order for c in g} != flat:
                    raise ConfigurationError(f"class order {order} must permute {sorted(flat)}")
        if self.sweep.data_ratios is not None:
            for r in self.sweep.data_ratios:
                if not (0.0 < r <= 1.0):
                    raise ConfigurationError(f"swept data ratio {r} outside (0, 1]")

    @staticmethod
    def schedule(steps: Sequence[Sequence[int]], ratio: float,
                 protocol: str = "overlapped") -> TaskSchedule:
        return TaskSchedule(
            steps=tuple(tuple(s) for s in steps), protocol=protocol, data_ratio=ratio
        )

    def mode_label(self) -> str:
        t = self.train
        if not (
            t.use_pseudo_labels
            or t.use_prototype_matching
            or t.use_feature_preserving
            or t.use_relevance_consistency
        ):
            return "fine-tuning"
        if (
            t.use_pseudo_labels
            and t.use_prototype_matching
            and t.use_feature_preserving
            and t.use_relevance_consistency
        ):
            return "full"
        return "custom"

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": dataclasses.asdict(self.dataset),
            "schedule_steps": [list(g) for g in self.schedule_steps],
            "protocol": self.protocol,
            "data_ratio": self.data_ratio,
            "net": dataclasses.asdict(self.net),
            "train": dataclasses.asdict(self.train),
            "epochs_per_step": list(self.epochs_per_step) if self.epochs_per_step else None,
            "sweep": dataclasses.asdict(self.sweep),
            "save_checkpoints": self.save_checkpoints,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        dataset = raw.get("dataset", {})
        if isinstance(dataset, dict):
            dataset = dict(dataset)
            if "shapes_per_image" in dataset:
                dataset["shapes_per_image"] = tuple(dataset["shapes_per_image"])
            dataset = DatasetConfig(**dataset)
        net = raw.get("net", {})
        if isinstance(net, dict):
            net = dict(net)
            for key in ("stage_channels", "pool_after_stage"):
                if key in net:
                    net[key] = tuple(net[key])
            net = NetConfig(**net)
        train = raw.get("train", {})
        if isinstance(train, dict):
            train = dict(train)
            if train.get("distill_stages") is not None:
                train["distill_stages"] = tuple(train["distill_stages"])
            train = StepConfig(**train)
        sweep = raw.get("sweep", {})
        if isinstance(sweep, dict):
            sweep = dict(sweep)
            if sweep.get("data_ratios") is not None:
                sweep["data_ratios"] = tuple(sweep["data_ratios"])
            if sweep.get("seeds") is not None:
                sweep["seeds"] = tuple(sweep["seeds"])
            if sweep.get("class_orders") is not None:
                sweep["class_orders"] = tuple(
                    tuple(tuple(g) for g in order) for order in sweep["class_orders"]
                )
            sweep = SweepConfig(**sweep)
        epochs = raw.get("epochs_per_step")
        return cls(
            name=raw.get("name", "toy"),
            dataset=dataset,
            schedule_steps=tuple(tuple(g) for g in raw.get("schedule_steps", ((1, 2, 3, 4), (5,)))),
            protocol=raw.get("protocol", "overlapped"),
            data_ratio=raw.get("data_ratio", 1.0),
            net=net,
            train=train,
            epochs_per_step=tuple(epochs) if epochs else None,
            sweep=sweep,
            save_checkpoints=raw.get("save_checkpoints", False),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path: str | pathlib.Path) -> ExperimentConfig:
    raw = json.loads(pathlib.Path(path).read_text())
    return ExperimentConfig.from_dict(raw)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested config dict."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key.path=value")
        key, _, value = item.partition("=")
        try:
            parsed: Any = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return out


# ---------------------------------------------------------------------------
# running


@dataclasses.dataclass(frozen=True)
class SweepPoint:
    index: int
    ratio: float
    order_index: int | None
    order: tuple[tuple[int, ...], ...]
    seed: int

    def key(self) -> str:
        order = "-" if self.order_index is None else str(self.order_index)
        return f"ratio={self.ratio}|order={order}|seed={self.seed}"

    def dirname(self) -> str:
        return f"point_{self.index:03d}"


def enumerate_points(config: ExperimentConfig) -> list[SweepPoint]:
    ratios = config.sweep.data_ratios or (config.data_ratio,)
    orders = config.sweep.class_orders
    order_items: list[tuple[int | None, tuple[tuple[int, ...], ...]]]
    if orders is None:
        order_items = [(None, config.schedule_steps)]
    else:
        order_items = list(enumerate(orders))
    seeds = config.sweep.seeds or (config.train.seed,)
    points = []
    for i, (ratio, (oi, order), seed) in enumerate(
        itertools.product(ratios, order_items, seeds)
    ):
        points.append(SweepPoint(index=i, ratio=float(ratio), order_index=oi,
                                 order=order, seed=int(seed)))
    return points


def _run_point(config: ExperimentConfig, point: SweepPoint, out_dir: pathlib.Path,
               config_hash: str) -> dict:
    train_data, val_data = config.dataset.build()
    schedule = ExperimentConfig.schedule(point.order, point.ratio, config.protocol)
    step_config = dataclasses.replace(config.train, seed=point.seed)
    checkpoint_dir = out_dir / "checkpoints" if config.save_checkpoints else None
    reports, _ = run_schedule(
        schedule,
        train_data,
        val_data,
        config.net,
        step_config,
        epochs_per_step=config.epochs_per_step,
        checkpoint_dir=checkpoint_dir,
        config_hash=config_hash,
    )
    metrics = {
        "config_hash": config_hash,
        "point": {"key": point.key(), "ratio": point.ratio,
                  "order_index": point.order_index, "seed": point.seed,
                  "schedule_steps": [list(g) for g in point.order]},
        "steps": [r.to_dict(include_timing=False) for r in reports],
        # plot-ready per-step grouped mIoU series
        "evolution": [
            {
                "step": r.step_index,
                "miou_init": (r.evaluation or {}).get("miou_init"),
                "miou_incre": (r.evaluation or {}).get("miou_incre"),
                "miou_all": (r.evaluation or {}).get("miou_all"),
            }
            for r in reports
        ],
        "final": reports[-1].evaluation,
    }
    meta = {
        "config_hash": config_hash,
        "durations_s": [r.duration_s for r in reports],
        "total_duration_s": sum(r.duration_s for r in reports),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    _write_steps_csv(out_dir / "steps.csv", reports, config_hash)
    return metrics


def _write_steps_csv(path: pathlib.Path, reports: list[StepReport], config_hash: str) -> None:
    lines = [f"# config={config_hash}", "step,class_id,iou"]
    for r in reports:
        per_class = (r.evaluation or {}).get("per_class_iou", {})
        for cid in sorted(per_class, key=lambda s: int(s)):
            iou = per_class[cid]
            lines.append(f"{r.step_index},{cid},{'' if iou is None else f'{iou:.6f}'}")
    path.write_text("\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig, out_root: str | pathlib.Path) -> pathlib.Path:
    """Execute every sweep point and write reports plus a summary table."""
    config.validate()
    torch.set_num_threads(1)  # keeps seeded runs bit-reproducible
    config_hash = config.config_hash()
    run_dir = pathlib.Path(out_root) / f"{config.name}-{config_hash}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True)
    )
    points = enumerate_points(config)
    rows = []
    for point in points:
        metrics = _run_point(config, point, run_dir / point.dirname(), config_hash)
        final = metrics["final"] or {}
        rows.append(
            {
                "key": point.key(),
                "dir": point.dirname(),
                "ratio": point.ratio,
                "order_index": point.order_index,
                "seed": point.seed,
                "per_step_n_train": [s["n_train"] for s in metrics["steps"]],
                "miou_init": final.get("miou_init"),
                "miou_incre": final.get("miou_incre"),
                "miou_all": final.get("miou_all"),
                "miou_all_with_background": final.get("miou_all_with_background"),
            }
        )
    summary: dict[str, Any] = {
        "name": config.name,
        "mode": config.mode_label(),
        "config_hash": config_hash,
        "dataset": dataclasses.asdict(config.dataset),
        "schedule_shape": [len(g) for g in config.schedule_steps],
        "schedule_steps": [list(g) for g in config.schedule_steps],
        "points": rows,
        "order_summary": None,
    }
    if config.sweep.class_orders is not None and len(config.sweep.class_orders) >= 2:
        finals = [r["miou_all"] for r in rows if r["miou_all"] is not None]
        mean, std = class_order_summary(finals)
        summary["order_summary"] = {"mean": mean, "std": std, "count": len(finals)}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (run_dir / "summary.txt").write_text(format_summary(summary))
    return run_dir


def format_summary(summary: dict) -> str:
    header = f"{summary['name']}  [{summary['mode']}]  config={summary['config_hash']}"
    cols = f"{'point':34s} {'n/step':>12s} {'init':>8s} {'incre':>8s} {'all':>8s}"
    lines = [header, cols, "-" * len(cols)]
    for row in summary["points"]:
        n_steps = "/".join(str(n) for n in row["per_step_n_train"])
        lines.append(
            f"{row['key']:34s} {n_steps:>12s} "
            f"{_fmt(row['miou_init'])} {_fmt(row['miou_incre'])} {_fmt(row['miou_all'])}"
        )
    if summary.get("order_summary"):
        s = summary["order_summary"]
        lines.append(f"{'order avg ± std':34s} {'':>12s} {'':>8s} {'':>8s} "
                     f"{s['mean']:.4f}±{s['std']:.4f}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    return f"{value:8.4f}" if value is not None else f"{'-':>8s}"


# ---------------------------------------------------------------------------
# comparing runs


def compare_runs(run_dirs: Sequence[str | pathlib.Path],
                 max_regression: float | None = None) -> dict:
    """Side-by-side grouped mIoU of runs sharing a dataset and schedule shape.

    Deltas are relative to the first run.  When ``max_regression`` is
    given, any matched metric that drops by more than that amount flags a
    regression.
    """
    if len(run_dirs) < 2:
        raise ContractError("need at least two run directories to compare")
    summaries = []
    for d in run_dirs:
        path = pathlib.Path(d) / "summary.json"
        if not path.exists():
            raise ContractError(f"{d} does not contain a run summary")
        summaries.append(json.loads(path.read_text()))
    base = summaries[0]
    for other in summaries[1:]:
        if other["dataset"] != base["dataset"]:
            raise ContractError("runs use different dataset specs")
        if other["schedule_shape"] != base["schedule_shape"]:
            raise ContractError("runs use different schedule shapes")
    base_points = {row["key"]: row for row in base["points"]}
    rows = []
    regressions = []
    for i, other in enumerate(summaries[1:], start=1):
        for row in other["points"]:
            match = base_points.get(row["key"])
            if match is None:
                continue
            for metric in ("miou_init", "miou_incre", "miou_all"):
                a, b = match.get(metric), row.get(metric)
                if a is None or b is None:
                    continue
                delta = b - a
                rows.append({"run": i, "key": row["key"], "metric": metric,
                             "base": a, "other": b, "delta": delta})
                if max_regression is not None and delta < -max_regression:
                    regressions.append(rows[-1])
    return {
        "base": str(run_dirs[0]),
        "others": [str(d) for d in run_dirs[1:]],
        "names": [s["name"] for s in summaries],
        "rows": rows,
        "regressions": regressions,
    }


def format_comparison(report: dict) -> str:
    lines = [f"base: {report['base']} ({report['names'][0]})"]
    for i, other in enumerate(report["others"], start=1):
        lines.append(f"run {i}: {other} ({report['names'][i]})")
    cols = f"{'run':>3s} {'point':34s} {'metric':12s} {'base':>8s} {'other':>8s} {'delta':>9s}"
    lines += [cols, "-" * len(cols)]
    for row in report["rows"]:
        lines.append(
            f"{row['run']:3d} {row['key']:34s} {row['metric']:12s} "
            f"{row['base']:8.4f} {row['other']:8.4f} {row['delta']:+9.4f}"
        )
    if report["regressions"]:
        lines.append(f"{len(report['regressions'])} regression(s) beyond tolerance")
    return "\n".join(lines) + "\n"


def toy_config(name: str = "toy-4-1") -> ExperimentConfig:
    """The committed reference configuration for the 4-1 desk experiment.

    The auxiliary terms run at gentle weights: at this scale their
    gradients otherwise swamp the pixel cross-entropy (the tiny network
    re-learns its whole feature space every step, unlike a large
    pretrained backbone).
    """
    return ExperimentConfig(
        name=name,
        dataset=DatasetConfig(),
        schedule_steps=((1, 2, 3, 4), (5,)),
        train=StepConfig(
            epochs=40,
            lr=0.02,
            batch_size=8,
            seed=424242,
            consistency_weight=0.02,
            distill_weight=0.02,
            prototype_momentum=0.98,
            distill_stages=(2,),
        ),
        epochs_per_step=(40, 40),
    )
