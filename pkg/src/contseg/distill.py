"""Disentangled distillation: prototype matching and feature preserving.

A prototype store keeps one running-average vector per class in the
invariant-channel subspace of one stage, a frozen copy from the previous
step, a background prototype, and an accumulator for unknown-pixel
semantics.  Prototype matching pulls current old-class prototypes toward
their frozen predecessors and pushes distinct prototypes apart; feature
preserving distills the full stage tensor globally and constrains the
specific channels with an asymmetric triplet hinge anchored at the old
model.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import ClassPartition
from .decouple import DecoupledEmbedding
from .errors import ContractError
from .net import DTYPE


def _sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).sum()


@dataclasses.dataclass
class PrototypeStore:
    """Running-average class prototypes for one distillation stage."""

    stage: int
    dim: int
    momentum: float = 0.9
    prototypes: dict[int, torch.Tensor] = dataclasses.field(default_factory=dict)
    frozen: dict[int, torch.Tensor] = dataclasses.field(default_factory=dict)
    counts: dict[int, int] = dataclasses.field(default_factory=dict)
    background: torch.Tensor | None = None
    unknown: torch.Tensor | None = None
    unknown_count: int = 0

    def __post_init__(self):
        if self.background is None:
            self.background = torch.zeros(self.dim, dtype=DTYPE)

    def start_step(self) -> None:
        """Seed the running averages from the frozen copies; reset unknowns."""
        self.prototypes = {k: v.clone() for k, v in self.frozen.items()}
        self.counts = {k: 0 for k in self.frozen}
        self.unknown = None
        self.unknown_count = 0

    def finish_step(self) -> None:
        """Freeze prototypes and recompute the background prototype.

        The background prototype is the mean of all present class
        prototypes together with the unknown-semantics accumulator.
        """
        self.frozen = {k: v.detach().clone() for k, v in self.prototypes.items()}
        self.prototypes = dict(self.frozen)
        parts = list(self.frozen.values())
        if self.unknown is not None and self.unknown_count > 0:
            parts.append(self.unknown)
        if parts:
            self.background = torch.stack(parts).mean(dim=0)

    def detach_(self) -> None:
        """Drop autodiff graphs after the optimizer step consumed them."""
        self.prototypes = {k: v.detach() for k, v in self.prototypes.items()}

    def clone(self) -> "PrototypeStore":
        return PrototypeStore(
            stage=self.stage,
            dim=self.dim,
            momentum=self.momentum,
            prototypes={k: v.detach().clone() for k, v in self.prototypes.items()},
            frozen={k: v.detach().clone() for k, v in self.frozen.items()},
            counts=dict(self.counts),
            background=self.background.detach().clone(),
            unknown=None if self.unknown is None else self.unknown.detach().clone(),
            unknown_count=self.unknown_count,
        )

    # -- serialization ------------------------------------------------------

    def to_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "background": self.background.detach().numpy(),
            "meta": np.array([self.stage, self.dim, self.unknown_count], dtype=np.int64),
            "momentum": np.array([self.momentum]),
        }
        for k, v in self.prototypes.items():
            out[f"proto/{k}"] = v.detach().numpy()
            out[f"count/{k}"] = np.array([self.counts.get(k, 0)], dtype=np.int64)
        for k, v in self.frozen.items():
            out[f"frozen/{k}"] = v.detach().numpy()
        if self.unknown is not None:
            out["unknown"] = self.unknown.detach().numpy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PrototypeStore":
        stage, dim, unknown_count = (int(v) for v in arrays["meta"])
        store = cls(stage=stage, dim=dim, momentum=float(arrays["momentum"][0]))
        for key, value in arrays.items():
            if key.startswith("proto/"):
                store.prototypes[int(key.split("/")[1])] = torch.from_numpy(value.copy())
            elif key.startswith("frozen/"):
                store.frozen[int(key.split("/")[1])] = torch.from_numpy(value.copy())
            elif key.startswith("count/"):
                store.counts[int(key.split("/")[1])] = int(value[0])
        store.background = torch.from_numpy(arrays["background"].copy())
        if "unknown" in arrays:
            store.unknown = torch.from_numpy(arrays["unknown"].copy())
        store.unknown_count = unknown_count
        return store


def batch_class_means(
    tensor: torch.Tensor, labels: np.ndarray, class_ids: Iterable[int]
) -> dict[int, torch.Tensor]:
    """Masked average pooling per class: mean over images of per-image means.

    ``tensor`` is (B, C, h, w); ``labels`` is (B, h, w) at the same
    resolution.  Classes without pixels in the batch are omitted.
    """
    if tensor.shape[0] != labels.shape[0] or tensor.shape[2:] != labels.shape[1:]:
        raise ContractError(
            f"features {tuple(tensor.shape)} do not align with labels {labels.shape}"
        )
    out: dict[int, torch.Tensor] = {}
    for k in class_ids:
        mask = torch.from_numpy((labels == k).astype(np.float64))
        per_image = mask.sum(dim=(1, 2))
        present = per_image > 0
        if not bool(present.any()):
            continue
        sums = (tensor * mask.unsqueeze(1)).sum(dim=(2, 3))
        means = sums[present] / per_image[present].unsqueeze(1)
        out[k] = means.mean(dim=0)
    return out


def update_prototypes(
    store: PrototypeStore,
    split: DecoupledEmbedding,
    labels: np.ndarray,
    partition: ClassPartition,
) -> PrototypeStore:
    """Blend batch prototypes into the store's running averages.

    Classes absent from the batch are left untouched.  The blended value
    keeps the autodiff graph of the batch term so the matching loss can
    propagate into the current model; the previous value enters detached.
    Unknown-labelled pixels feed a separate accumulator (detached).
    """
    if split.invariant_tensor.dim() != 4:
        raise ContractError("update_prototypes expects a batched (B,C,h,w) invariant tensor")
    if split.invariant_tensor.shape[1] != store.dim:
        raise ContractError(
            f"store dimension {store.dim} does not match invariant channels "
            f"{split.invariant_tensor.shape[1]}"
        )
    mu = store.momentum
    means = batch_class_means(split.invariant_tensor, labels, partition.known_classes)
    for k, batch_mean in means.items():
        prev = store.prototypes.get(k)
        if prev is None:
            store.prototypes[k] = batch_mean
        else:
            store.prototypes[k] = mu * prev.detach() + (1.0 - mu) * batch_mean
        store.counts[k] = store.counts.get(k, 0) + 1
    unk = batch_class_means(split.invariant_tensor.detach(), labels, [partition.unknown_id])
    if partition.unknown_id in unk:
        batch_mean = unk[partition.unknown_id]
        if store.unknown is None:
            store.unknown = batch_mean
        else:
            store.unknown = mu * store.unknown + (1.0 - mu) * batch_mean
        store.unknown_count += 1
    return store


def prototype_matching_loss(
    store: PrototypeStore, partition: ClassPartition, eps: float = 1e-6
) -> torch.Tensor:
    """Prototype matching: intra-class pull plus inter-class repulsion.

    intra: mean squared distance between each old class's running
    prototype and its frozen predecessor (0 at step 0 by convention).
    inter: mean over known classes k of sum_{i != k} 1/(d(p_k, ref_i)+eps)
    plus 1/(d(p_k, p_bg)+eps), where ref_i is the frozen prototype when
    one exists and the detached running value otherwise.
    """
    if store.dim == 0:
        return torch.zeros((), dtype=DTYPE)
    intra = torch.zeros((), dtype=DTYPE)
    if partition.old_classes:
        missing = [k for k in partition.old_classes if k not in store.frozen]
        if missing:
            raise ContractError(
                f"store has no frozen prototypes for old classes {missing} at step "
                f"{partition.step_index}"
            )
        terms = [
            _sq_dist(store.prototypes.get(k, store.frozen[k]), store.frozen[k])
            for k in partition.old_classes
        ]
        intra = torch.stack(terms).mean()

    present = [k for k in partition.known_classes if k in store.prototypes]
    with_reference = [k for k in partition.known_classes
                      if k in store.frozen or k in store.prototypes]
    inter = torch.zeros((), dtype=DTYPE)
    if present:
        terms = []
        for k in present:
            p = store.prototypes[k]
            acc = 1.0 / (_sq_dist(p, store.background) + eps)
            for i in with_reference:
                if i == k:
                    continue
                ref = store.frozen.get(i)
                if ref is None:
                    ref = store.prototypes[i].detach()
                acc = acc + 1.0 / (_sq_dist(p, ref) + eps)
            terms.append(acc)
        inter = torch.stack(terms).mean()
    return intra + inter


@dataclasses.dataclass
class TripletBatch:
    """One per-class triplet: frozen-model anchor, current-model pos/neg."""

    class_id: int
    negative_class_id: int
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    margin: float

    def __post_init__(self):
        if self.class_id == self.negative_class_id:
            raise ContractError("triplet negative must come from a different class")


def build_triplets(
    anchor_means: dict[int, torch.Tensor],
    positive_means: dict[int, torch.Tensor],
    margin: float,
    anchor_classes: Sequence[int] | None = None,
) -> list[TripletBatch]:
    """Form per-class triplets with hardest in-batch negatives.

    Anchors come from the frozen model (detached) and are only meaningful
    for classes that model was trained on, so ``anchor_classes`` usually
    lists the old classes; positives and negatives come from the current
    model (negatives may be any other class, including new ones).  The
    negative for class k is the other-class current mean closest to k's
    anchor.  Classes lacking an anchor, a positive, or any other class
    are skipped.
    """
    triplets: list[TripletBatch] = []
    allowed = set(anchor_means if anchor_classes is None else anchor_classes)
    for k in sorted(positive_means):
        if k not in anchor_means or k not in allowed:
            continue
        anchor = anchor_means[k].detach()
        candidates = [(j, positive_means[j]) for j in sorted(positive_means) if j != k]
        if not candidates:
            continue
        dists = [float(_sq_dist(anchor, c.detach()).item()) for _, c in candidates]
        j_best = int(np.argmin(dists))
        neg_id, negative = candidates[j_best]
        triplets.append(
            TripletBatch(
                class_id=k,
                negative_class_id=neg_id,
                anchor=anchor,
                positive=positive_means[k],
                negative=negative,
                margin=margin,
            )
        )
    return triplets


def feature_preserving_loss(
    old_stage: torch.Tensor,
    new_stage: torch.Tensor,
    triplets: Sequence[TripletBatch],
) -> torch.Tensor:
    """Feature preserving: global stage distillation plus triplet hinge.

    The global term is the mean squared difference between the current
    and frozen stage tensors (frozen side detached); the triplet term
    averages max(d(a,p) - d(a,n) + margin, 0) over the formed triplets
    with squared-L2 distances.  Without triplets only the global term
    remains.
    """
    if old_stage.shape != new_stage.shape:
        raise ContractError(
            f"stage shapes differ: {tuple(old_stage.shape)} vs {tuple(new_stage.shape)}"
        )
    loss = ((new_stage - old_stage.detach()) ** 2).mean()
    if triplets:
        hinges = [
            torch.clamp(
                _sq_dist(t.anchor.detach(), t.positive)
                - _sq_dist(t.anchor.detach(), t.negative)
                + t.margin,
                min=0.0,
            )
            for t in triplets
        ]
        loss = loss + torch.stack(hinges).mean()
    return loss


def distillation_loss(
    per_stage_matching: Sequence[torch.Tensor | float],
    per_stage_preserving: Sequence[torch.Tensor | float],
) -> torch.Tensor:
    """Mean over distillation stages of the stage-wise matching+preserving sum."""
    if len(per_stage_matching) == 0 or len(per_stage_matching) != len(per_stage_preserving):
        raise ContractError("per-stage loss lists must be non-empty and aligned")
    total = torch.zeros((), dtype=DTYPE)
    for a, b in zip(per_stage_matching, per_stage_preserving):
        a_t = a if isinstance(a, torch.Tensor) else torch.tensor(float(a), dtype=DTYPE)
        b_t = b if isinstance(b, torch.Tensor) else torch.tensor(float(b), dtype=DTYPE)
        total = total + a_t + b_t
    return total / len(per_stage_matching)
