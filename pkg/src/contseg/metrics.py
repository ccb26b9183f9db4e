"""Confusion matrices, per-class IoU and grouped mean IoU."""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Sequence

import numpy as np

from .data import IGNORE_ID, UNKNOWN_ID, BACKGROUND_ID
from .errors import ContractError, UndefinedMetricError


class ConfusionMatrix:
    """Pixel counts indexed by (ground truth, prediction) class.

    Ignore pixels are skipped; unknown predictions fold into background.
    Unknown ids in the ground truth are a contract violation.
    """

    def __init__(self, class_ids: Sequence[int]):
        if len(set(class_ids)) != len(class_ids):
            raise ContractError("duplicate class ids")
        if UNKNOWN_ID in class_ids or IGNORE_ID in class_ids:
            raise ContractError("sentinel ids cannot be evaluation classes")
        self.class_ids = list(class_ids)
        self._index = {cid: i for i, cid in enumerate(self.class_ids)}
        self.matrix = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)

    def _to_index(self, raster: np.ndarray) -> np.ndarray:
        idx = np.full(raster.shape, -1, dtype=np.int64)
        for cid, i in self._index.items():
            idx[raster == cid] = i
        return idx

    def accumulate(self, prediction: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        if prediction.shape != gt.shape:
            raise ContractError(f"prediction {prediction.shape} vs gt {gt.shape}")
        if (gt == UNKNOWN_ID).any():
            raise ContractError("ground truth contains the unknown id")
        prediction = prediction.copy()
        prediction[prediction == UNKNOWN_ID] = BACKGROUND_ID
        valid = gt != IGNORE_ID
        gt_idx = self._to_index(gt[valid])
        if (gt_idx < 0).any():
            bad = np.unique(gt[valid][gt_idx < 0])
            raise ContractError(f"gt contains ids outside the matrix: {bad.tolist()}")
        pr_idx = self._to_index(prediction[valid])
        if (pr_idx < 0).any():
            bad = np.unique(prediction[valid][pr_idx < 0])
            raise ContractError(f"prediction contains ids outside the matrix: {bad.tolist()}")
        k = len(self.class_ids)
        flat = gt_idx * k + pr_idx
        self.matrix += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_ids != self.class_ids:
            raise ContractError("cannot merge matrices over different class sets")
        self.matrix += other.matrix
        return self

    def total(self) -> int:
        return int(self.matrix.sum())


def accumulate(cm: ConfusionMatrix, prediction: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(prediction, gt)


def per_class_iou(cm: ConfusionMatrix) -> dict[int, float | None]:
    """IoU per class; None where the class appears in neither gt nor prediction."""
    diag = np.diag(cm.matrix).astype(np.float64)
    rows = cm.matrix.sum(axis=1).astype(np.float64)
    cols = cm.matrix.sum(axis=0).astype(np.float64)
    denom = rows + cols - diag
    out: dict[int, float | None] = {}
    for i, cid in enumerate(cm.class_ids):
        out[cid] = float(diag[i] / denom[i]) if denom[i] > 0 else None
    return out


def miou(cm: ConfusionMatrix, subset: Iterable[int]) -> float:
    """Mean IoU over ``subset``; zero-denominator classes are excluded."""
    subset = list(subset)
    if not subset:
        raise ContractError("class subset must be non-empty")
    unknown = [c for c in subset if c not in cm._index]
    if unknown:
        raise ContractError(f"classes {unknown} are not tracked by this matrix")
    ious = per_class_iou(cm)
    values = [ious[c] for c in subset if ious[c] is not None]
    if not values:
        raise UndefinedMetricError("every class in the subset has an empty denominator")
    return float(sum(values) / len(values))


@dataclasses.dataclass
class MetricsGroup:
    """Per-class IoU plus grouped means over initial/incremented/all classes."""

    per_class: dict[int, float | None]
    miou_init: float | None
    miou_incre: float | None
    miou_all: float | None
    miou_all_with_background: float | None


def _safe_miou(cm: ConfusionMatrix, subset: list[int]) -> float | None:
    if not subset:
        return None
    try:
        return miou(cm, subset)
    except UndefinedMetricError:
        return None


def metrics_group(
    cm: ConfusionMatrix,
    init_classes: Sequence[int],
    incre_classes: Sequence[int],
) -> MetricsGroup:
    """Grouped means; background is excluded from "all" but reported separately."""
    init = [c for c in init_classes if c != BACKGROUND_ID]
    incre = [c for c in incre_classes if c != BACKGROUND_ID]
    all_classes = init + incre
    with_bg = ([BACKGROUND_ID] if BACKGROUND_ID in cm._index else []) + all_classes
    return MetricsGroup(
        per_class=per_class_iou(cm),
        miou_init=_safe_miou(cm, init),
        miou_incre=_safe_miou(cm, incre),
        miou_all=_safe_miou(cm, all_classes),
        miou_all_with_background=_safe_miou(cm, with_bg),
    )


def class_order_summary(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of final all-class mIoU values."""
    if len(values) < 2:
        raise ContractError("need at least two class orders to summarize")
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return float(mean), float(math.sqrt(var))
