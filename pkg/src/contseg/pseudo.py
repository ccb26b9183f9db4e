"""Uncertainty maps, unknown-class assignment and pseudo-label fusion.

All operations are per-pixel functions of the frozen model's soft
segmentation map.  The certainty of a pixel is the gap between its top
two scores; the uncertainty range is the gap between its top and bottom
scores.  Their ratio (0 when the range is 0) measures prediction
stability and is compared against a threshold in (0, 1]; configs may
express that threshold as its reciprocal "divisor" form instead.
"""

from __future__ import annotations

import dataclasses
import pathlib

import numpy as np

from .data import BACKGROUND_ID, IGNORE_ID, ClassPartition
from .errors import ContractError

PROV_GT = 0
PROV_PSEUDO = 1
PROV_UNKNOWN = 2
PROV_BACKGROUND = 3

_PROV_NAMES = {PROV_GT: "gt", PROV_PSEUDO: "pseudo",
               PROV_UNKNOWN: "unknown", PROV_BACKGROUND: "background"}


@dataclasses.dataclass
class CertaintyMaps:
    """Per-pixel certainty, uncertainty range and diagnostic uncertainty map."""

    certainty: np.ndarray       # (H, W): top1 - top2
    range: np.ndarray           # (H, W): top1 - bottom
    uncertainty: np.ndarray     # (K, H, W): soft map scaled by (1 - certainty)

    def stability_ratio(self) -> np.ndarray:
        """certainty / range, with 0 (maximally unstable) where range is 0."""
        out = np.zeros_like(self.certainty)
        np.divide(self.certainty, self.range, out=out, where=self.range > 0)
        return out


def _check_soft_map(soft_map: np.ndarray) -> None:
    if soft_map.ndim != 3:
        raise ContractError(f"soft map must be (K,H,W), got shape {soft_map.shape}")
    if soft_map.shape[0] < 2:
        raise ContractError("soft map needs at least two classes (second-highest undefined)")
    sums = soft_map.sum(axis=0)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ContractError("soft map rows are not normalized")


def certainty_maps(soft_map: np.ndarray) -> CertaintyMaps:
    """Compute certainty u, range and the diagnostic uncertainty map.

    u is the absolute gap between the highest and second-highest scores;
    the range is the gap between the highest and lowest.  For normalized
    rows both lie in [0, 1] and u <= range everywhere.
    """
    _check_soft_map(soft_map)
    ordered = np.sort(soft_map, axis=0)[::-1]
    certainty = ordered[0] - ordered[1]
    rng = ordered[0] - ordered[-1]
    uncertainty = soft_map * (1.0 - certainty)[None]
    return CertaintyMaps(certainty=certainty, range=rng, uncertainty=uncertainty)


def assign_unknown(
    soft_map: np.ndarray,
    prediction: np.ndarray,
    partition: ClassPartition,
    confidence_threshold: float,
    stability_threshold: float,
) -> np.ndarray:
    """Mark pixels as unknown: background-predicted, low-score, unstable.

    A pixel is unknown iff its prediction is background, its top score is
    below the confidence threshold, and its stability ratio is below the
    stability threshold.
    """
    _check_thresholds(confidence_threshold, stability_threshold)
    maps = certainty_maps(soft_map)
    if prediction.shape != maps.certainty.shape:
        raise ContractError("prediction raster does not match the soft map")
    top = soft_map.max(axis=0)
    ratio = maps.stability_ratio()
    return (
        (prediction == partition.background_id)
        & (top < confidence_threshold)
        & (ratio < stability_threshold)
    )


def pseudo_labels(
    soft_map: np.ndarray,
    partition: ClassPartition,
    confidence_threshold: float,
    stability_threshold: float,
    row_class_ids: list[int] | None = None,
    model_unknown: bool = True,
) -> np.ndarray:
    """Three-way per-pixel pseudo labels from the frozen model's soft map.

    A pixel keeps the frozen model's prediction when the argmax is an old
    class with top score >= the confidence threshold and stability ratio
    >= the stability threshold; it becomes unknown when the argmax is
    background with top score and ratio below their thresholds; otherwise
    it is background.  With ``model_unknown`` off the unknown branch
    falls back to background.  Soft-map rows are [background] followed by
    the old classes in introduction order unless ``row_class_ids`` says
    otherwise.
    """
    _check_thresholds(confidence_threshold, stability_threshold)
    _check_soft_map(soft_map)
    if row_class_ids is None:
        row_class_ids = [partition.background_id] + list(partition.old_classes)
    if len(row_class_ids) != soft_map.shape[0]:
        raise ContractError(
            f"soft map has {soft_map.shape[0]} rows but {len(row_class_ids)} ids were given"
        )
    lut = np.asarray(row_class_ids, dtype=np.int16)
    maps = certainty_maps(soft_map)
    ratio = maps.stability_ratio()
    top = soft_map.max(axis=0)
    pred = lut[soft_map.argmax(axis=0)]

    old = np.isin(pred, list(partition.old_classes))
    keep = old & (top >= confidence_threshold) & (ratio >= stability_threshold)
    unknown = (
        (pred == partition.background_id)
        & (top < confidence_threshold)
        & (ratio < stability_threshold)
    )
    out = np.full(pred.shape, partition.background_id, dtype=np.int16)
    out[keep] = pred[keep]
    if model_unknown:
        out[unknown] = partition.unknown_id
    return out


def _check_thresholds(confidence_threshold: float, stability_threshold: float) -> None:
    if not (0.0 < confidence_threshold < 1.0):
        raise ContractError("confidence threshold must lie in (0, 1)")
    if not (0.0 < stability_threshold <= 1.0):
        raise ContractError("stability threshold must lie in (0, 1]")


@dataclasses.dataclass
class FusedLabelMap:
    """Step-t supervision: ground truth for current classes, pseudo elsewhere."""

    labels: np.ndarray
    provenance: np.ndarray
    unknown_id: int

    def ce_labels(self) -> np.ndarray:
        """Labels for cross-entropy: unknown pixels mapped to ignore."""
        out = self.labels.copy()
        out[self.labels == self.unknown_id] = IGNORE_ID
        return out

    def histogram(self) -> dict[str, int]:
        return {
            name: int((self.provenance == code).sum())
            for code, name in sorted(_PROV_NAMES.items())
        }


def fuse_labels(
    pseudo: np.ndarray, gt: np.ndarray, partition: ClassPartition
) -> FusedLabelMap:
    """Overlay current-class ground truth on a pseudo-label raster.

    Pixels with a current-class ground-truth label always win and carry
    gt provenance; ground-truth ignore pixels stay ignore.  Everything
    else takes the pseudo raster value.
    """
    if pseudo.shape != gt.shape:
        raise ContractError(f"pseudo {pseudo.shape} and gt {gt.shape} shapes differ")
    labels = pseudo.astype(np.int16).copy()
    provenance = np.full(gt.shape, PROV_BACKGROUND, dtype=np.uint8)
    provenance[np.isin(pseudo, list(partition.old_classes))] = PROV_PSEUDO
    provenance[pseudo == partition.unknown_id] = PROV_UNKNOWN

    current = np.isin(gt, list(partition.new_classes))
    labels[current] = gt[current]
    provenance[current] = PROV_GT
    ignore = gt == IGNORE_ID
    labels[ignore] = IGNORE_ID
    provenance[ignore] = PROV_GT
    return FusedLabelMap(labels=labels, provenance=provenance, unknown_id=partition.unknown_id)


def plain_fusion(gt: np.ndarray, partition: ClassPartition) -> FusedLabelMap:
    """Fusion with an all-background pseudo raster (pseudo-labelling off)."""
    pseudo = np.full(gt.shape, BACKGROUND_ID, dtype=np.int16)
    return fuse_labels(pseudo, gt, partition)


def save_diagnostics(
    path: str | pathlib.Path,
    maps: CertaintyMaps,
    unknown_mask: np.ndarray | None = None,
    pseudo: np.ndarray | None = None,
) -> None:
    """Dump per-image uncertainty rasters for offline inspection."""
    arrays = {
        "certainty": maps.certainty,
        "range": maps.range,
        "uncertainty": maps.uncertainty,
    }
    if unknown_mask is not None:
        arrays["unknown_mask"] = unknown_mask
    if pseudo is not None:
        arrays["pseudo"] = pseudo
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
