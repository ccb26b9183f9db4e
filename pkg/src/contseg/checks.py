"""Self-contained oracle battery: property checks runnable from the CLI.

Each check pits an implementation against an independent brute-force
oracle (sorting, pixel tallies, truth tables, finite differences) and
returns a pass/fail result with a short detail string.  The acceptance
test suite drives the same functions.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable, Sequence

import numpy as np
import torch

from . import pseudo as pseudo_mod
from .data import (
    IGNORE_ID,
    ClassPartition,
    LabeledImage,
    SyntheticSceneSpec,
    TaskSchedule,
    default_universe,
    split_for_step,
)
from .decouple import channel_similarity, rank_and_split, round_half_up, ChannelSimilarity
from .distill import PrototypeStore, batch_class_means, build_triplets, feature_preserving_loss, prototype_matching_loss, update_prototypes
from .errors import ContsegError
from .metrics import ConfusionMatrix, miou, per_class_iou
from .net import DTYPE, NetConfig, SegNetwork, extend_head, snapshot
from .relevance import consistency_loss, propagate_relevance
from .trainer import StepConfig, TrainState, compute_batch_losses, prepare_fused_labels


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    duration_s: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} ({self.duration_s:.1f}s)"


def _timed(fn: Callable[[], tuple[bool, str]], name: str) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except ContsegError as exc:
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name=name, passed=passed, detail=detail,
                       duration_s=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# relevance conservation


def _random_small_net(rng: np.random.Generator) -> tuple[SegNetwork, int]:
    n_stages = int(rng.integers(1, 4))
    widths = tuple(int(rng.integers(2, 6)) for _ in range(n_stages))
    pools = tuple(bool(rng.integers(0, 2)) if i < n_stages - 1 else False
                  for i in range(n_stages))
    cfg = NetConfig(
        in_channels=int(rng.integers(1, 4)),
        stage_channels=widths,
        pool_after_stage=pools,
        kernel_size=3,
    )
    n_classes = int(rng.integers(2, 5))
    net = SegNetwork(cfg, class_ids=list(range(1, n_classes + 1)),
                     seed=[int(rng.integers(0, 2 ** 31)), 3])
    n_params = sum(p.numel() for p in net.parameters())
    return net, n_params


def check_relevance_conservation(n_nets: int = 50, seed: int = 2024,
                                 eps: float = 1e-6) -> tuple[bool, str]:
    """Total relevance survives propagation whenever denominators are healthy."""
    rng = np.random.default_rng(seed)
    checked = 0
    absorbed_cases = 0
    worst = 0.0
    for _ in range(n_nets):
        net, n_params = _random_small_net(rng)
        assert n_params <= 5000, f"random net too large: {n_params} params"
        h = w = 8
        x = torch.tensor(rng.normal(0.0, 1.0, size=(1, net.config.in_channels, h, w)),
                         dtype=DTYPE)
        bundle = net.forward_bundle(x)
        class_id = int(rng.choice(net.class_ids))
        field = propagate_relevance(net, bundle, class_id, eps=eps)
        min_denom = min(field.layer_min_denominator.values())
        if min_denom <= 10 * eps:
            absorbed_cases += 1
            continue
        seed_total = float(field.seed_total()[0].item())
        denom = max(abs(seed_total), 1e-9)
        for total in (
            float(field.total_at_stage(max(field.stage_relevance))[0].item()),
            float(field.input_relevance.sum().item()),
        ):
            rel = abs(total - seed_total) / denom
            worst = max(worst, rel)
            if rel > 1e-6:
                return False, (
                    f"conservation broke: rel err {rel:.3e} with min denominator "
                    f"{min_denom:.3e}"
                )
        checked += 1
    return checked > 0, (
        f"{checked}/{n_nets} nets conserved (worst rel err {worst:.2e}); "
        f"{absorbed_cases} stabilized-absorption cases skipped and logged"
    )


# ---------------------------------------------------------------------------
# decoupling oracle


def check_decoupling(n_cases: int = 100, seed: int = 77) -> tuple[bool, str]:
    """rank_and_split against a brute-force sort; reconstruction bit-exact."""
    rng = np.random.default_rng(seed)
    cases = 0
    for i in range(n_cases):
        if i < 2:  # the configured operating points: ratio 0.6 at 8 and 32 channels
            n, ratio = (8, 0.6) if i == 0 else (32, 0.6)
            scores = rng.normal(0.0, 1.0, size=n)
        else:
            n = int(rng.integers(1, 33))
            scores = rng.normal(0.0, 1.0, size=n)
            if i % 3 == 0:  # exercise ties
                scores = np.round(scores, 1)
            ratio = float(rng.uniform(0.0, 1.0))
        emb = torch.tensor(rng.normal(size=(2, n, 3, 3)), dtype=DTYPE)
        sim = ChannelSimilarity(scores=scores)
        dec = rank_and_split(sim, emb, ratio)
        m = round_half_up(ratio * n)
        # oracle: stable sort of (-score, index) pairs
        order = sorted(range(n), key=lambda c: (-scores[c], c))
        expect_si = tuple(sorted(order[:m]))
        expect_ss = tuple(sorted(order[m:]))
        if dec.invariant_indices != expect_si or dec.specific_indices != expect_ss:
            return False, f"membership mismatch at case {i}: {dec.invariant_indices} vs {expect_si}"
        if len(dec.invariant_indices) != m:
            return False, f"cardinality {len(dec.invariant_indices)} != round-half-up {m}"
        if not torch.equal(dec.reconstruct(), emb):
            return False, f"reconstruction not bit-exact at case {i}"
        cases += 1
    if round_half_up(0.6 * 8) != 5:
        return False, "round-half-up(0.6*8) != 5"
    return True, f"{cases} random (scores, ratio) cases matched the sort oracle"


# ---------------------------------------------------------------------------
# pseudo-label truth tables


def _construct_vector(k: int, target_row: int, top: float, ratio: float,
                      spread: float) -> np.ndarray | None:
    """A k-simplex vector with given argmax value, stability ratio and range."""
    second = top - ratio * spread
    low = top - spread
    n_fill = k - 3
    filler = (1.0 - top - second - low) / n_fill
    if low < 0 or filler < low - 1e-12 or filler > second + 1e-12 or second >= top:
        return None
    rows = [r for r in range(k) if r != target_row]
    vec = np.empty(k)
    vec[target_row] = top
    vec[rows[0]] = second
    for r in rows[1:-1]:
        vec[r] = filler
    vec[rows[-1]] = low
    if abs(vec.sum() - 1.0) > 1e-9 or np.argmax(vec) != target_row:
        return None
    return vec


def _oracle_branch(vec: np.ndarray, row_ids: list[int], partition: ClassPartition,
                   conf: float, stab: float) -> int:
    """Scalar restatement of the three-way rule, evaluated per pixel."""
    s = np.sort(vec)[::-1]
    u = s[0] - s[1]
    rng = s[0] - s[-1]
    ratio = u / rng if rng > 0 else 0.0
    pred = row_ids[int(np.argmax(vec))]
    if pred in partition.old_classes and s[0] >= conf and ratio >= stab:
        return pred
    if pred == partition.background_id and s[0] < conf and ratio < stab:
        return partition.unknown_id
    return partition.background_id


def check_pseudo_truth_tables() -> tuple[bool, str]:
    """Exhaustive branch-predicate grid versus the per-pixel rule.

    Combinations that cannot occur on a probability simplex (a very
    confident yet unstable pixel, a zero range away from the uniform
    vector, or an old-model argmax on a class its head does not know)
    are counted as skipped.
    """
    conf, stab = 0.4, 0.5
    partition = ClassPartition(old_classes=(1, 2, 3), new_classes=(4,), step_index=1)
    old_rows = [0, 1, 2, 3]      # frozen-model rows: background + old classes
    cur_rows = [0, 1, 2, 3, 4]   # current-model rows include the new class

    top_grid = [conf - 0.08, conf, conf + 0.09]
    ratio_grid = [stab - 0.2, stab, stab + 0.3]
    spreads = [0.1, 0.15, 0.2, 0.3, 0.45]
    realized = 0
    skipped = 0

    def build(k: int, row: int, top: float, ratio: float) -> np.ndarray | None:
        for spread in spreads:
            vec = _construct_vector(k, row, top, ratio, spread)
            if vec is not None:
                return vec
        return None

    # pseudo-label rule on the frozen model's map (argmax: bg or an old class)
    for target_row in range(len(old_rows)):
        for top in top_grid:
            for ratio in ratio_grid:
                vec = build(len(old_rows), target_row, top, ratio)
                if vec is None:
                    skipped += 1
                    continue
                soft = vec.reshape(-1, 1, 1)
                got = pseudo_mod.pseudo_labels(soft, partition, conf, stab,
                                               row_class_ids=old_rows)[0, 0]
                want = _oracle_branch(vec, old_rows, partition, conf, stab)
                if int(got) != int(want):
                    return False, (
                        f"rule mismatch: row={target_row} top={top} ratio={ratio} "
                        f"got {got} want {want}"
                    )
                realized += 1

    # flat map: zero range, ratio convention 0, argmax falls on background
    k = len(old_rows)
    flat = np.full((k, 1, 1), 1.0 / k)
    got = pseudo_mod.pseudo_labels(flat, partition, conf, stab, row_class_ids=old_rows)[0, 0]
    if int(got) != partition.unknown_id:
        return False, f"flat map should be unknown, got {got}"
    realized += 1

    # unknown-assignment rule on the current model's map (includes the new class)
    for target_row in range(len(cur_rows)):
        for top in top_grid:
            for ratio in ratio_grid:
                vec = build(len(cur_rows), target_row, top, ratio)
                if vec is None:
                    skipped += 1
                    continue
                soft = vec.reshape(-1, 1, 1)
                pred = np.array([[cur_rows[int(np.argmax(vec))]]], dtype=np.int16)
                got_mask = pseudo_mod.assign_unknown(soft, pred, partition, conf, stab)[0, 0]
                s = np.sort(vec)[::-1]
                u, rng = s[0] - s[1], s[0] - s[-1]
                r = u / rng if rng > 0 else 0.0
                want_mask = (
                    pred[0, 0] == partition.background_id and s[0] < conf and r < stab
                )
                if bool(got_mask) != bool(want_mask):
                    return False, f"unknown-mask mismatch at row={target_row} top={top}"
                realized += 1
    flat5 = np.full((len(cur_rows), 1, 1), 1.0 / len(cur_rows))
    pred = np.array([[0]], dtype=np.int16)
    if not pseudo_mod.assign_unknown(flat5, pred, partition, conf, stab)[0, 0]:
        return False, "flat current-model map should be assigned unknown"
    realized += 1
    return True, f"{realized} realizable grid points matched; {skipped} unrealizable skipped"


# ---------------------------------------------------------------------------
# certainty bounds


def check_certainty_bounds(n: int = 10_000, seed: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    k = 6
    vecs = rng.dirichlet(np.ones(k), size=n)  # (n, k)
    soft = vecs.T.reshape(k, n, 1)
    maps = pseudo_mod.certainty_maps(soft)
    u = maps.certainty[:, 0]
    d = maps.range[:, 0]
    if not ((u >= 0).all() and (u <= 1).all() and (d >= 0).all() and (d <= 1).all()):
        return False, "certainty or range escaped [0, 1]"
    if not (u <= d + 1e-15).all():
        return False, "found a pixel with certainty above its range"
    ordered = np.sort(vecs, axis=1)[:, ::-1]
    if not np.array_equal(u, ordered[:, 0] - ordered[:, 1]):
        return False, "certainty does not match the sort oracle"
    if not np.array_equal(d, ordered[:, 0] - ordered[:, -1]):
        return False, "range does not match the sort oracle"
    return True, f"{n} random simplex vectors satisfied the bounds exactly"


# ---------------------------------------------------------------------------
# mIoU oracle


def _brute_force_iou(pred: np.ndarray, gt: np.ndarray, classes: list[int]) -> dict[int, float | None]:
    out: dict[int, float | None] = {}
    valid = gt != IGNORE_ID
    for c in classes:
        tp = int(((pred == c) & (gt == c) & valid).sum())
        fp = int(((pred == c) & (gt != c) & valid).sum())
        fn = int(((pred != c) & (gt == c) & valid).sum())
        denom = tp + fp + fn
        out[c] = tp / denom if denom else None
    return out


def check_miou_oracle(n_cases: int = 100, seed: int = 11) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        classes = [0] + list(range(1, int(rng.integers(2, 6))))
        shape = (int(rng.integers(3, 12)), int(rng.integers(3, 12)))
        choices = classes + [IGNORE_ID]
        gt = rng.choice(choices, size=shape)
        pred = rng.choice(classes, size=shape)
        cm = ConfusionMatrix(classes).accumulate(pred, gt)
        got = per_class_iou(cm)
        want = _brute_force_iou(pred, gt, classes)
        for c in classes:
            a, b = got[c], want[c]
            if (a is None) != (b is None):
                return False, f"case {case}: class {c} definedness mismatch"
            if a is not None and abs(a - b) > 1e-12:
                return False, f"case {case}: class {c} IoU {a} vs oracle {b}"
        defined = [c for c in classes[1:] if want[c] is not None]
        if defined:
            mean_oracle = sum(want[c] for c in defined) / len(defined)
            if abs(miou(cm, classes[1:]) - mean_oracle) > 1e-12:
                return False, f"case {case}: grouped mIoU deviates from oracle"
    return True, f"{n_cases} random raster pairs matched the pixel-tally oracle to 1e-12"


# ---------------------------------------------------------------------------
# data-limited split arithmetic


def check_split_counts() -> tuple[bool, str]:
    base = np.zeros((1, 1, 1))
    images = [
        LabeledImage(pixels=base + i, labels=np.full((1, 1), 2, dtype=np.int16))
        for i in range(487)
    ]
    expected = {1.0: 487, 0.75: 366, 0.5: 244, 0.25: 122, 0.1: 49}
    for ratio, want in expected.items():
        schedule = TaskSchedule(steps=((1,), (2,)), protocol="overlapped", data_ratio=ratio)
        got = split_for_step(images, schedule, 1)
        if len(got) != want:
            return False, f"ratio {ratio}: kept {len(got)}, expected {want}"
        for j, img in enumerate(got):  # prefix in sequence order
            if img.pixels[0, 0, 0] != j:
                return False, f"ratio {ratio}: retained set is not the sequence prefix"
    return True, "487-entry manifest reproduced 244 at 50% and 49 at 10%"


# ---------------------------------------------------------------------------
# gradients versus central finite differences


def make_increment_scenario(seed: int = 31415):
    """A miniature step-1 state with real fused labels and warm prototypes."""
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    cfg = NetConfig(in_channels=3, stage_channels=(4, 6), pool_after_stage=(True, False))
    base = SegNetwork(cfg, class_ids=[1, 2], seed=[seed, 0])
    old = snapshot(base)
    model = extend_head(base, [3])
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.from_numpy(rng.normal(0.0, 0.05, size=tuple(p.shape))))

    spec = SyntheticSceneSpec(height=16, width=16, classes=default_universe(3),
                              shapes_per_image=(1, 2), noise=0.05, seed=seed + 1)
    from .data import generate_dataset

    images = generate_dataset(spec, 2)
    config = StepConfig(
        epochs=1, lr=0.05, batch_size=2, seed=seed,
        confidence_threshold=0.4, stability_divisor=5.0,
        invariant_ratio=0.6, prototype_momentum=0.5,
    )
    partition = ClassPartition(old_classes=(1, 2), new_classes=(3,), step_index=1)

    # warm the prototype stores on the frozen model at step-0 geometry
    stores: dict[int, PrototypeStore] = {}
    part0 = ClassPartition(old_classes=(), new_classes=(1, 2), step_index=0)
    x_warm = torch.tensor(np.stack([im.pixels for im in images]), dtype=DTYPE)
    with torch.no_grad():
        bundle_warm = old.forward_bundle(x_warm)
    from .data import downsample_labels
    from .trainer import _identity_similarity, _resolve_stages

    warm_labels = np.stack([np.where(np.isin(im.labels, [1, 2]), im.labels, 0)
                            for im in images])
    for s in _resolve_stages(old, config):
        stage = bundle_warm.stages[s]
        dec = rank_and_split(_identity_similarity(stage.shape[1]), stage,
                             config.invariant_ratio)
        labels_ds = np.stack([
            downsample_labels(warm_labels[b], tuple(stage.shape[2:]))
            for b in range(warm_labels.shape[0])
        ])
        store = PrototypeStore(stage=s, dim=len(dec.invariant_indices),
                               momentum=config.prototype_momentum)
        update_prototypes(store, dec, labels_ds, part0)
        store.finish_step()
        store.start_step()
        stores[s] = store

    state = TrainState(model=model, old_model=old, stores=stores, partition=partition)
    fused = prepare_fused_labels(state, images, config)
    labels = np.stack([f.labels for f in fused])
    x = torch.tensor(np.stack([im.pixels for im in images]), dtype=DTYPE)
    return state, x, labels, config


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    entries: Sequence[tuple[int, int]],
    h: float = 1e-4,
    rtol: float = 1e-4,
) -> tuple[int, float]:
    """Compare autograd gradients with central differences at given entries.

    Returns (failures, worst relative error).  The relative error is
    measured against max(|analytic|, |fd|) with a small floor so that
    near-zero gradients compare absolutely.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    failures = 0
    worst = 0.0
    for pi, flat in entries:
        p = params[pi]
        with torch.no_grad():
            orig = float(p.view(-1)[flat].item())
            p.view(-1)[flat] = orig + h
        lp = float(loss_fn().item())
        with torch.no_grad():
            p.view(-1)[flat] = orig - h
        lm = float(loss_fn().item())
        with torch.no_grad():
            p.view(-1)[flat] = orig
        fd = (lp - lm) / (2 * h)
        g = grads[pi]
        analytic = float(g.view(-1)[flat].item()) if g is not None else 0.0
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, err)
        if err > rtol and abs(analytic - fd) > 1e-9:
            failures += 1
    return failures, worst


def check_gradients(seed: int = 31415, n_entries: int = 24,
                    quick: bool = False) -> tuple[bool, str]:
    """Autograd versus central differences for every loss term."""
    state, x, labels, config = make_increment_scenario(seed)
    model, old = state.model, state.old_model
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(seed + 9)
    if quick:
        n_entries = 8
    flat_sizes = [p.numel() for p in params]
    entries = []
    for _ in range(n_entries):
        pi = int(rng.integers(0, len(params)))
        entries.append((pi, int(rng.integers(0, flat_sizes[pi]))))

    def ce_fn():
        bundle = model.forward_bundle(x)
        from .trainer import ce_loss

        return ce_loss(model, bundle.logits, labels)

    def consistency_fn():
        return consistency_loss(old, model, x, list(state.partition.old_classes), eps=config.eps)

    stage = model.decouple_stage

    def _split_new_old():
        bundle = model.forward_bundle(x)
        with torch.no_grad():
            bundle_old = old.forward_bundle(x)
        new_stage = bundle.stages[stage]
        old_stage = bundle_old.stages[stage]
        sim = channel_similarity(new_stage, old_stage)
        dec = rank_and_split(sim, new_stage, config.invariant_ratio)
        from .data import downsample_labels

        labels_ds = np.stack([
            downsample_labels(labels[b], tuple(new_stage.shape[2:]))
            for b in range(labels.shape[0])
        ])
        return new_stage, old_stage, dec, labels_ds

    def matching_fn():
        _, _, dec, labels_ds = _split_new_old()
        store = state.stores[stage].clone()
        update_prototypes(store, dec, labels_ds, state.partition)
        return prototype_matching_loss(store, state.partition, eps=config.eps)

    def preserving_fn():
        new_stage, old_stage, dec, labels_ds = _split_new_old()
        specific_idx = torch.tensor(dec.specific_indices, dtype=torch.long)
        anchors = batch_class_means(old_stage.index_select(1, specific_idx), labels_ds,
                                    state.partition.old_classes)
        positives = batch_class_means(new_stage.index_select(1, specific_idx), labels_ds,
                                      state.partition.known_classes)
        triplets = build_triplets(anchors, positives, config.triplet_margin,
                                  anchor_classes=state.partition.old_classes)
        return feature_preserving_loss(old_stage, new_stage, triplets)

    def total_fn():
        stores = {s: st.clone() for s, st in state.stores.items()}
        losses = compute_batch_losses(model, old, stores, state.partition, x, labels, config)
        return losses["total"]

    specs = [
        ("ce", ce_fn, 1e-4),
        ("consistency", consistency_fn, 1e-3),
        ("prototype-matching", matching_fn, 1e-4),
        ("feature-preserving", preserving_fn, 1e-4),
        ("total", total_fn, 1e-3),
    ]
    details = []
    for name, fn, rtol in specs:
        failures, worst = finite_difference_check(fn, params, entries, rtol=rtol)
        details.append(f"{name}: worst {worst:.2e}")
        if failures:
            return False, f"{name}: {failures}/{len(entries)} entries beyond {rtol} ({worst:.2e})"
    return True, "; ".join(details)


# ---------------------------------------------------------------------------


def run_all(quick: bool = False, seed: int = 2024) -> list[CheckResult]:
    checks = [
        ("relevance-conservation",
         lambda: check_relevance_conservation(n_nets=20 if quick else 50, seed=seed)),
        ("decoupling-oracle", lambda: check_decoupling(n_cases=30 if quick else 100)),
        ("pseudo-truth-tables", check_pseudo_truth_tables),
        ("certainty-bounds",
         lambda: check_certainty_bounds(n=2000 if quick else 10_000)),
        ("miou-oracle", lambda: check_miou_oracle(n_cases=30 if quick else 100)),
        ("split-counts", check_split_counts),
        ("gradient-validation", lambda: check_gradients(quick=quick)),
    ]
    return [_timed(fn, name) for name, fn in checks]
