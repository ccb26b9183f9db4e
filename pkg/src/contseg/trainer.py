"""Incremental training: step orchestration, loss assembly, freezing.

Step 0 trains with cross-entropy only.  Later steps freeze the previous
model, extend the classifier head, fuse uncertainty-aware pseudo labels
with the current ground truth, and optimize the weighted sum of
cross-entropy, the relevance-consistency term and the distillation term.
Only the current model receives gradients; the snapshot never changes.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import time
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import pseudo as pseudo_mod
from .data import (
    IGNORE_ID,
    ClassPartition,
    LabeledImage,
    TaskSchedule,
    downsample_labels,
    split_for_step,
)
from .decouple import SUPPORTED_METRICS, ChannelSimilarity, channel_similarity, rank_and_split
from .distill import (
    PrototypeStore,
    batch_class_means,
    build_triplets,
    distillation_loss,
    feature_preserving_loss,
    prototype_matching_loss,
    update_prototypes,
)
from .errors import ConfigurationError, ContractError, DivergenceError
from .metrics import ConfusionMatrix, metrics_group
from .net import DTYPE, NetConfig, SegNetwork, extend_head, predict, snapshot
from .relevance import consistency_loss


@dataclasses.dataclass(frozen=True)
class StepConfig:
    """Hyper-parameters and module toggles for one incremental step."""

    epochs: int = 10
    lr: float = 0.01
    poly_power: float = 0.9
    batch_size: int = 8
    seed: int = 0
    # per-term weights of the total objective (1.0 each: unweighted sum)
    ce_weight: float = 1.0
    consistency_weight: float = 1.0
    distill_weight: float = 1.0
    # module toggles
    use_pseudo_labels: bool = True
    use_unknown_class: bool = True
    use_prototype_matching: bool = True
    use_feature_preserving: bool = True
    use_relevance_consistency: bool = True
    # thresholds and constants
    similarity_metric: str = "cosine"
    invariant_ratio: float = 0.6
    confidence_threshold: float = 0.7
    stability_divisor: float = 5.0
    stability_threshold: float | None = None
    prototype_momentum: float = 0.9
    triplet_margin: float = 0.2
    eps: float = 1e-6
    # softens the 1/d^2 prototype repulsion; the bare 1e-6 stabilizer leaves
    # its gradient unbounded near coincident prototypes and training diverges
    repulsion_eps: float = 0.1
    distill_stages: tuple[int, ...] | None = None  # None: the final two stages
    rerank_every_iteration: bool = True
    relevance_class_subsample: int | None = None
    refresh_pseudo_each_epoch: bool = False
    distill_include_logits: bool = False

    def effective_stability_threshold(self) -> float:
        """Ratio-space threshold; the divisor form is its reciprocal."""
        if self.stability_threshold is not None:
            return self.stability_threshold
        return 1.0 / self.stability_divisor

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.similarity_metric not in SUPPORTED_METRICS:
            raise ConfigurationError(
                f"unknown similarity metric {self.similarity_metric!r}"
            )
        if not (0.0 <= self.invariant_ratio <= 1.0):
            raise ConfigurationError("invariant_ratio must lie in [0, 1]")
        if not (0.0 < self.confidence_threshold < 1.0):
            raise ConfigurationError("confidence_threshold must lie in (0, 1)")
        thr = self.effective_stability_threshold()
        if not (0.0 < thr <= 1.0):
            raise ConfigurationError("stability threshold must lie in (0, 1]")
        if not (0.0 <= self.prototype_momentum < 1.0):
            raise ConfigurationError("prototype momentum must lie in [0, 1)")
        if self.triplet_margin < 0:
            raise ConfigurationError("triplet margin must be >= 0")
        if self.eps <= 0 or self.repulsion_eps <= 0:
            raise ConfigurationError("stabilizers must be positive")


@dataclasses.dataclass
class TrainState:
    """Mutable training state owned by the single trainer thread."""

    model: SegNetwork
    old_model: SegNetwork | None
    stores: dict[int, PrototypeStore]
    partition: ClassPartition


@dataclasses.dataclass
class StepReport:
    """Per-step record: losses per iteration, counts, and evaluation."""

    step_index: int
    old_classes: list[int]
    new_classes: list[int]
    n_train: int
    epochs: int
    batch_size: int
    iterations: list[dict]
    provenance: dict[str, int]
    evaluation: dict | None = None
    snapshot_param_delta: float | None = None
    duration_s: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "step_index": self.step_index,
            "old_classes": self.old_classes,
            "new_classes": self.new_classes,
            "n_train": self.n_train,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "provenance": self.provenance,
            "evaluation": self.evaluation,
            "snapshot_param_delta": self.snapshot_param_delta,
        }
        if include_timing:
            out["duration_s"] = self.duration_s
        return out


def poly_lr(base_lr: float, iteration: int, total_iterations: int, power: float) -> float:
    """lr(i) = base * (1 - i/i_max)^power; monotone, 0 at i_max."""
    if total_iterations <= 0:
        return base_lr
    frac = min(max(1.0 - iteration / total_iterations, 0.0), 1.0)
    return base_lr * frac ** power


def make_state(net_config: NetConfig, step0_classes: Sequence[int], config: StepConfig) -> TrainState:
    config.validate()
    partition = ClassPartition(old_classes=(), new_classes=tuple(step0_classes), step_index=0)
    model = SegNetwork(net_config, class_ids=list(step0_classes), seed=[config.seed, 0])
    return TrainState(model=model, old_model=None, stores={}, partition=partition)


def advance_state(state: TrainState, new_classes: Sequence[int]) -> TrainState:
    """Freeze the current model, extend its head, rotate the partition."""
    old = snapshot(state.model)
    model = extend_head(state.model, list(new_classes))
    partition = ClassPartition(
        old_classes=state.partition.known_classes,
        new_classes=tuple(new_classes),
        background_id=state.partition.background_id,
        unknown_id=state.partition.unknown_id,
        step_index=state.partition.step_index + 1,
    )
    for store in state.stores.values():
        store.start_step()
    return TrainState(model=model, old_model=old, stores=state.stores, partition=partition)


def ce_loss(
    model: SegNetwork, logits: torch.Tensor, labels: np.ndarray
) -> torch.Tensor:
    """Pixel cross-entropy at label resolution (nearest upsampled logits).

    Ignore and unknown sentinels are excluded; with no valid pixel the
    loss is an exact zero connected to the graph.
    """
    up = F.interpolate(logits, size=labels.shape[1:], mode="nearest")
    rows = model.rows_from_labels(labels)
    target = torch.from_numpy(rows)
    flat_logits = up.permute(0, 2, 3, 1).reshape(-1, up.shape[1])
    flat_target = target.reshape(-1)
    if not bool((flat_target >= 0).any()):
        return flat_logits.sum() * 0.0
    return F.cross_entropy(flat_logits, flat_target, ignore_index=-1)


def _default_stages(model: SegNetwork) -> tuple[int, ...]:
    n = len(model.stage_positions)
    return tuple(range(max(0, n - 2), n))


def _resolve_stages(model: SegNetwork, config: StepConfig) -> tuple[int, ...]:
    stages = config.distill_stages if config.distill_stages is not None else _default_stages(model)
    n = len(model.stage_positions)
    bad = [s for s in stages if not (0 <= s < n)]
    if bad:
        raise ConfigurationError(f"distill stages {bad} outside the {n} network stages")
    return tuple(stages)


def _identity_similarity(num_channels: int) -> ChannelSimilarity:
    # no frozen model to rank against: all-equal scores select the
    # lowest-index channels deterministically
    return ChannelSimilarity(scores=np.ones(num_channels), metric="cosine")


def compute_batch_losses(
    model: SegNetwork,
    old_model: SegNetwork | None,
    stores: dict[int, PrototypeStore],
    partition: ClassPartition,
    x: torch.Tensor,
    fused_labels: np.ndarray,
    config: StepConfig,
    similarity_cache: dict[int, ChannelSimilarity] | None = None,
    iteration: int = 0,
) -> dict[str, torch.Tensor]:
    """Assemble the step objective for one batch.

    Mutates ``stores`` through the prototype running averages (pass
    clones for a side-effect-free evaluation).  Terms that are toggled
    off or weighted 0 are skipped entirely, so a run with only the
    cross-entropy term is bit-identical to plain fine-tuning.
    """
    bundle = model.forward_bundle(x)
    losses: dict[str, torch.Tensor] = {}
    losses["ce"] = ce_loss(model, bundle.logits, fused_labels)
    total = config.ce_weight * losses["ce"]

    incremental = partition.step_index > 0 and old_model is not None
    want_consistency = (
        incremental
        and config.use_relevance_consistency
        and config.consistency_weight != 0.0
    )
    want_matching = incremental and config.use_prototype_matching and config.distill_weight != 0.0
    want_preserving = incremental and config.use_feature_preserving and config.distill_weight != 0.0

    if want_consistency:
        old_classes = list(partition.old_classes)
        k = config.relevance_class_subsample
        if k is not None and 0 < k < len(old_classes):
            start = (iteration * k) % len(old_classes)
            old_classes = [old_classes[(start + j) % len(old_classes)] for j in range(k)]
        losses["consistency"] = consistency_loss(old_model, model, x, old_classes, eps=config.eps)
        total = total + config.consistency_weight * losses["consistency"]

    if want_matching or want_preserving:
        with torch.no_grad():
            bundle_old = old_model.forward_bundle(x)
        stages = _resolve_stages(model, config)
        matching_terms: list[torch.Tensor] = []
        preserving_terms: list[torch.Tensor] = []
        for s in stages:
            new_stage = bundle.stages[s]
            old_stage = bundle_old.stages[s]
            if similarity_cache is not None and s in similarity_cache:
                sim = similarity_cache[s]
            else:
                sim = channel_similarity(new_stage, old_stage, metric=config.similarity_metric)
                if similarity_cache is not None:
                    similarity_cache[s] = sim
            dec_new = rank_and_split(sim, new_stage, config.invariant_ratio)
            labels_ds = np.stack(
                [downsample_labels(fused_labels[b], tuple(new_stage.shape[2:]))
                 for b in range(fused_labels.shape[0])]
            )
            if want_matching:
                store = stores.get(s)
                if store is None:
                    store = PrototypeStore(
                        stage=s,
                        dim=len(dec_new.invariant_indices),
                        momentum=config.prototype_momentum,
                    )
                    stores[s] = store
                update_prototypes(store, dec_new, labels_ds, partition)
                matching_terms.append(prototype_matching_loss(store, partition, eps=config.repulsion_eps))
            else:
                matching_terms.append(torch.zeros((), dtype=DTYPE))
            if want_preserving:
                specific_idx = torch.tensor(dec_new.specific_indices, dtype=torch.long)
                new_specific = new_stage.index_select(1, specific_idx)
                old_specific = old_stage.index_select(1, specific_idx)
                anchors = batch_class_means(old_specific, labels_ds, partition.old_classes)
                positives = batch_class_means(new_specific, labels_ds, partition.known_classes)
                triplets = build_triplets(anchors, positives, config.triplet_margin,
                                          anchor_classes=partition.old_classes)
                preserving_terms.append(feature_preserving_loss(old_stage, new_stage, triplets))
            else:
                preserving_terms.append(torch.zeros((), dtype=DTYPE))
        losses["distill"] = distillation_loss(matching_terms, preserving_terms)
        if want_preserving and config.distill_include_logits:
            losses["distill"] = losses["distill"] + (
                (bundle.logits[:, : bundle_old.logits.shape[1]] - bundle_old.logits.detach()) ** 2
            ).mean()
        total = total + config.distill_weight * losses["distill"]

    losses["total"] = total
    return losses


def _prototype_bookkeeping_step0(
    model: SegNetwork,
    stores: dict[int, PrototypeStore],
    partition: ClassPartition,
    bundle,
    labels: np.ndarray,
    config: StepConfig,
) -> None:
    """Maintain prototypes during step 0 (no matching loss is applied).

    Without a frozen model to rank against, the invariant channels are
    the lowest-index ones; the split dimension matches later steps.
    """
    for s in _resolve_stages(model, config):
        stage = bundle.stages[s].detach()
        sim = _identity_similarity(stage.shape[1])
        dec = rank_and_split(sim, stage, config.invariant_ratio)
        labels_ds = np.stack(
            [downsample_labels(labels[b], tuple(stage.shape[2:]))
             for b in range(labels.shape[0])]
        )
        store = stores.get(s)
        if store is None:
            store = PrototypeStore(
                stage=s, dim=len(dec.invariant_indices), momentum=config.prototype_momentum
            )
            stores[s] = store
        update_prototypes(store, dec, labels_ds, partition)


def prepare_fused_labels(
    state: TrainState, data: Sequence[LabeledImage], config: StepConfig
) -> list[pseudo_mod.FusedLabelMap]:
    """Fuse pseudo labels (from the frozen model) with current ground truth.

    At step 0 or with pseudo-labelling off this is plain fusion against
    an all-background raster.
    """
    partition = state.partition
    fused: list[pseudo_mod.FusedLabelMap] = []
    use_pseudo = (
        partition.step_index > 0 and config.use_pseudo_labels and state.old_model is not None
    )
    for img in data:
        if use_pseudo:
            x = torch.tensor(img.pixels, dtype=DTYPE).unsqueeze(0)
            with torch.no_grad():
                logits = state.old_model.forward(x)
                up = F.interpolate(logits, size=img.labels.shape, mode="nearest")
                soft = torch.softmax(up, dim=1)[0].numpy()
            raster = pseudo_mod.pseudo_labels(
                soft,
                partition,
                config.confidence_threshold,
                config.effective_stability_threshold(),
                row_class_ids=[partition.background_id] + state.old_model.class_ids,
                model_unknown=config.use_unknown_class,
            )
            fused.append(pseudo_mod.fuse_labels(raster, img.labels, partition))
        else:
            fused.append(pseudo_mod.plain_fusion(img.labels, partition))
    return fused


def run_step(
    state: TrainState, data: Sequence[LabeledImage], config: StepConfig
) -> tuple[TrainState, StepReport]:
    """Train the current model for one incremental step.

    Aborts with a :class:`DivergenceError` naming the offending term if
    any loss becomes non-finite.
    """
    config.validate()
    partition = state.partition
    step = partition.step_index
    if step > 0 and state.old_model is None:
        raise ContractError(f"step {step} requires a frozen snapshot of the previous model")
    started = time.perf_counter()

    fused = prepare_fused_labels(state, data, config)
    provenance: dict[str, int] = {"gt": 0, "pseudo": 0, "unknown": 0, "background": 0}
    for f in fused:
        for key, val in f.histogram().items():
            provenance[key] += val

    report = StepReport(
        step_index=step,
        old_classes=list(partition.old_classes),
        new_classes=list(partition.new_classes),
        n_train=len(data),
        epochs=config.epochs,
        batch_size=config.batch_size,
        iterations=[],
        provenance=provenance,
    )
    if config.epochs == 0 or len(data) == 0:
        report.duration_s = time.perf_counter() - started
        if state.old_model is not None:
            report.snapshot_param_delta = 0.0
        return state, report

    old_params_before = None
    if state.old_model is not None:
        old_params_before = [p.detach().clone() for p in state.old_model.parameters()]

    pixels = np.stack([img.pixels for img in data])
    # fused rasters keep the unknown sentinel; the row mapping inside the
    # cross-entropy already excludes it, and prototype updates need it
    rasters = np.stack([f.labels for f in fused])

    opt = torch.optim.SGD(state.model.parameters(), lr=config.lr, momentum=0.9)
    n = len(data)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    i_max = config.epochs * batches_per_epoch
    rng = np.random.default_rng([config.seed, 101 + step])
    iteration = 0
    track_prototypes = step == 0 and (
        config.use_prototype_matching and config.distill_weight != 0.0
    )
    for epoch in range(config.epochs):
        if config.refresh_pseudo_each_epoch and epoch > 0:
            # the snapshot is frozen, so a refresh reproduces the same labels;
            # kept for API symmetry only
            pass
        order = rng.permutation(n)
        sim_cache: dict | None = None if config.rerank_every_iteration else {}
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size: (b + 1) * config.batch_size]
            x = torch.tensor(pixels[idx], dtype=DTYPE)
            batch_labels = rasters[idx]
            losses = compute_batch_losses(
                state.model,
                state.old_model,
                state.stores,
                partition,
                x,
                batch_labels,
                config,
                similarity_cache=sim_cache,
                iteration=iteration,
            )
            for name, value in losses.items():
                if not bool(torch.isfinite(value)):
                    raise DivergenceError(
                        f"loss term {name!r} became non-finite at step {step}, "
                        f"iteration {iteration}"
                    )
            if track_prototypes:
                with torch.no_grad():
                    bundle0 = state.model.forward_bundle(x)
                _prototype_bookkeeping_step0(
                    state.model, state.stores, partition, bundle0, batch_labels, config
                )
            lr_i = poly_lr(config.lr, iteration, i_max, config.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr_i
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for store in state.stores.values():
                store.detach_()
            trace = {"iteration": iteration, "epoch": epoch, "lr": lr_i}
            for name, value in losses.items():
                trace[name] = float(value.detach().item())
            report.iterations.append(trace)
            iteration += 1

    for store in state.stores.values():
        store.finish_step()

    if state.old_model is not None and old_params_before is not None:
        delta = max(
            float((p.detach() - before).abs().max().item())
            for p, before in zip(state.old_model.parameters(), old_params_before)
        )
        report.snapshot_param_delta = delta
    report.duration_s = time.perf_counter() - started
    return state, report


def evaluate(
    model: SegNetwork,
    images: Sequence[LabeledImage],
    init_classes: Sequence[int],
    seen_classes: Sequence[int],
) -> dict:
    """Validation metrics over the classes seen so far.

    Ground-truth labels of classes not yet learned are folded into
    background, mirroring step-wise evaluation on a fully labelled split.
    """
    seen = list(seen_classes)
    cm = ConfusionMatrix([0] + seen)
    for img in images:
        pred = predict(model, img.pixels)
        gt = img.labels.copy()
        fold = ~np.isin(gt, [0, IGNORE_ID] + seen)
        gt[fold] = 0
        cm.accumulate(pred, gt)
    init = [c for c in init_classes if c in seen]
    incre = [c for c in seen if c not in init]
    group = metrics_group(cm, init, incre)
    return {
        "per_class_iou": {str(k): v for k, v in group.per_class.items()},
        "miou_init": group.miou_init,
        "miou_incre": group.miou_incre,
        "miou_all": group.miou_all,
        "miou_all_with_background": group.miou_all_with_background,
        "pixels": cm.total(),
    }


def run_schedule(
    schedule: TaskSchedule,
    train_data: Sequence[LabeledImage],
    val_data: Sequence[LabeledImage],
    net_config: NetConfig,
    config: StepConfig,
    epochs_per_step: Sequence[int] | None = None,
    checkpoint_dir: str | pathlib.Path | None = None,
    config_hash: str = "",
) -> tuple[list[StepReport], TrainState]:
    """Run every step of a schedule, evaluating after each one."""
    schedule.validate()
    if epochs_per_step is not None and len(epochs_per_step) != schedule.num_steps:
        raise ConfigurationError("epochs_per_step must cover every schedule step")
    reports: list[StepReport] = []
    state = make_state(net_config, schedule.classes_at(0), config)
    for step in range(schedule.num_steps):
        if step > 0:
            state = advance_state(state, schedule.classes_at(step))
        step_config = config
        if epochs_per_step is not None:
            step_config = dataclasses.replace(config, epochs=int(epochs_per_step[step]))
        data_t = split_for_step(train_data, schedule, step)
        state, report = run_step(state, data_t, step_config)
        seen = [c for group in schedule.steps[: step + 1] for c in group]
        report.evaluation = evaluate(state.model, val_data, schedule.classes_at(0), seen)
        reports.append(report)
        if checkpoint_dir is not None:
            path = pathlib.Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path / f"step_{step}.npz", state, config_hash)
    return reports, state


# ---------------------------------------------------------------------------
# checkpointing: model + prototype stores + partition + config hash


def save_checkpoint(path: str | pathlib.Path, state: TrainState, config_hash: str = "") -> None:
    arrays: dict[str, np.ndarray] = {
        f"param/{name}": p.detach().numpy() for name, p in state.model.named_parameters()
    }
    for stage, store in state.stores.items():
        for key, value in store.to_arrays().items():
            arrays[f"store/{stage}/{key}"] = value
    manifest = {
        "version": 1,
        "config_hash": config_hash,
        "class_ids": state.model.class_ids,
        "net_config": dataclasses.asdict(state.model.config),
        "partition": {
            "old_classes": list(state.partition.old_classes),
            "new_classes": list(state.partition.new_classes),
            "background_id": state.partition.background_id,
            "unknown_id": state.partition.unknown_id,
            "step_index": state.partition.step_index,
        },
        "stores": sorted(state.stores),
    }
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path: str | pathlib.Path) -> TrainState:
    with np.load(pathlib.Path(path)) as blob:
        manifest = json.loads(bytes(blob["manifest"]).decode())
        cfg_dict = dict(manifest["net_config"])
        for key in ("stage_channels", "pool_after_stage"):
            cfg_dict[key] = tuple(cfg_dict[key])
        model = SegNetwork(NetConfig(**cfg_dict), manifest["class_ids"])
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(blob[f"param/{name}"]))
        stores: dict[int, PrototypeStore] = {}
        for stage in manifest["stores"]:
            prefix = f"store/{stage}/"
            arrays = {
                key[len(prefix):]: blob[key] for key in blob.files if key.startswith(prefix)
            }
            stores[int(stage)] = PrototypeStore.from_arrays(arrays)
        part = manifest["partition"]
        partition = ClassPartition(
            old_classes=tuple(part["old_classes"]),
            new_classes=tuple(part["new_classes"]),
            background_id=part["background_id"],
            unknown_id=part["unknown_id"],
            step_index=part["step_index"],
        )
    return TrainState(model=model, old_model=None, stores=stores, partition=partition)
