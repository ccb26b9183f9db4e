"""Synthetic labelled scenes, incremental class schedules and step-wise splits.

Images are colored geometric shapes on a noisy gray background; each
(shape kind, color) pair is one semantic class.  A labelled raster marks
every shape pixel with its class id, everything else with the background
id.  The generator is fully deterministic: the same spec and seed produce
the same dataset byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import pathlib
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, ProtocolError

BACKGROUND_ID = 0
IGNORE_ID = -1       # reserved sentinel, excluded from every loss and metric
UNKNOWN_ID = -2      # explicit unknown class, never a classifier output row

SHAPE_KINDS = ("disk", "square", "triangle", "ring")

# Distinct colors; universe size is capped so classes stay separable.
_PALETTE = (
    (0.90, 0.10, 0.10),
    (0.10, 0.75, 0.20),
    (0.15, 0.35, 0.95),
    (0.95, 0.80, 0.15),
    (0.80, 0.15, 0.80),
    (0.10, 0.80, 0.80),
    (0.95, 0.50, 0.10),
    (0.55, 0.35, 0.15),
    (0.45, 0.10, 0.60),
    (0.60, 0.85, 0.30),
    (0.90, 0.45, 0.60),
    (0.35, 0.55, 0.55),
)


@dataclasses.dataclass(frozen=True)
class ShapeClass:
    """One semantic class: a shape kind rendered in a fixed color."""

    class_id: int
    kind: str
    color: tuple[float, float, float]


_DEFAULT_KINDS = ("disk", "square", "triangle")  # filled kinds survive pooling


def default_universe(num_classes: int) -> tuple[ShapeClass, ...]:
    """Build ``num_classes`` separable classes with ids 1..num_classes."""
    if num_classes < 1:
        raise ConfigurationError("class universe must contain at least one class")
    if num_classes > len(_PALETTE):
        raise ConfigurationError(
            f"universe limited to {len(_PALETTE)} separable classes, got {num_classes}"
        )
    return tuple(
        ShapeClass(i + 1, _DEFAULT_KINDS[i % len(_DEFAULT_KINDS)], _PALETTE[i])
        for i in range(num_classes)
    )


@dataclasses.dataclass(frozen=True)
class LabeledImage:
    """A raster image plus its per-pixel label map.

    pixels: float64 array shaped (channels, H, W), values in [0, 1].
    labels: integer array shaped (H, W); background, current-step class
    ids, or the ignore sentinel.
    """

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ContractError(f"pixels must be (C,H,W), got shape {self.pixels.shape}")
        if self.labels.shape != self.pixels.shape[1:]:
            raise ContractError(
                f"labels {self.labels.shape} do not match pixels {self.pixels.shape[1:]}"
            )

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclasses.dataclass(frozen=True)
class SyntheticSceneSpec:
    """Deterministic recipe for a synthetic scene dataset."""

    height: int = 32
    width: int = 32
    classes: tuple[ShapeClass, ...] = dataclasses.field(default_factory=lambda: default_universe(5))
    shapes_per_image: tuple[int, int] = (1, 3)
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("image size must be at least 8x8")
        if not self.classes:
            raise ConfigurationError("scene spec has an empty class universe")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate class ids in universe")
        if any(i <= 0 for i in ids):
            raise ConfigurationError("class ids must be positive (0 is background)")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigurationError("shapes_per_image must satisfy 1 <= lo <= hi")
        if self.noise < 0:
            raise ConfigurationError("noise amplitude must be non-negative")
        for c in self.classes:
            if c.kind not in SHAPE_KINDS:
                raise ConfigurationError(f"unknown shape kind {c.kind!r}")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes)


def _shape_mask(kind: str, height: int, width: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dy = yy - cy
    dx = xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if kind == "triangle":
        # isoceles, apex up: widens linearly toward the base row
        return (dy >= -r) & (dy <= r) & (np.abs(dx) * 2 <= dy + r)
    if kind == "ring":
        inner = max(1, int(r * 0.55))
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= inner * inner)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def generate_dataset(spec: SyntheticSceneSpec, count: int) -> list[LabeledImage]:
    """Render ``count`` deterministic scenes from ``spec``.

    The first shape of image ``i`` cycles through the universe so every
    class is guaranteed to appear once ``count >= |universe|``.  Labels
    match the rendered masks exactly; later shapes overwrite earlier ones.
    """
    spec.validate()
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    k = len(spec.classes)
    r_lo = max(2, min(h, w) // 8)
    r_hi = max(r_lo, min(h, w) // 4)
    images: list[LabeledImage] = []
    for idx in range(count):
        base = rng.uniform(0.35, 0.55, size=(3, 1, 1))
        pixels = np.broadcast_to(base, (3, h, w)).copy()
        labels = np.zeros((h, w), dtype=np.int16)
        n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        for s in range(n_shapes):
            cls = spec.classes[idx % k] if s == 0 else spec.classes[int(rng.integers(0, k))]
            r = int(rng.integers(r_lo, r_hi + 1))
            cy = int(rng.integers(r, max(r + 1, h - r)))
            cx = int(rng.integers(r, max(r + 1, w - r)))
            mask = _shape_mask(cls.kind, h, w, cy, cx, r)
            jitter = rng.uniform(-0.08, 0.08, size=3)
            color = np.clip(np.asarray(cls.color) + jitter, 0.0, 1.0)
            pixels[:, mask] = color[:, None]
            labels[mask] = cls.class_id
        pixels = np.clip(pixels + rng.uniform(-spec.noise, spec.noise, size=(3, h, w)), 0.0, 1.0)
        images.append(LabeledImage(pixels=pixels, labels=labels))
    return images


@dataclasses.dataclass(frozen=True)
class TaskSchedule:
    """Ordered class groups per incremental step plus the split protocol."""

    steps: tuple[tuple[int, ...], ...]
    protocol: str = "overlapped"
    data_ratio: float = 1.0

    def validate(self) -> None:
        if not self.steps or any(len(s) == 0 for s in self.steps):
            raise ConfigurationError("schedule must contain non-empty class lists")
        flat = [c for group in self.steps for c in group]
        if len(set(flat)) != len(flat):
            raise ConfigurationError("schedule class lists must be disjoint")
        if any(c <= 0 for c in flat):
            raise ConfigurationError("schedule classes must be positive ids")
        if self.protocol not in ("overlapped", "disjoint"):
            raise ConfigurationError(f"unknown protocol {self.protocol!r}")
        if not (0.0 < self.data_ratio <= 1.0):
            raise ConfigurationError("data_ratio must lie in (0, 1]")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def classes_at(self, step: int) -> tuple[int, ...]:
        self._check_step(step)
        return self.steps[step]

    def classes_before(self, step: int) -> tuple[int, ...]:
        self._check_step(step)
        return tuple(c for group in self.steps[:step] for c in group)

    def classes_after(self, step: int) -> tuple[int, ...]:
        self._check_step(step)
        return tuple(c for group in self.steps[step + 1:] for c in group)

    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for group in self.steps for c in group)

    def _check_step(self, step: int) -> None:
        if not (0 <= step < len(self.steps)):
            raise ProtocolError(f"step {step} outside schedule of {len(self.steps)} steps")


@dataclasses.dataclass(frozen=True)
class ClassPartition:
    """Per-step bookkeeping of previously learned vs current classes."""

    old_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    background_id: int = BACKGROUND_ID
    unknown_id: int = UNKNOWN_ID
    step_index: int = 0

    def __post_init__(self):
        old, new = set(self.old_classes), set(self.new_classes)
        if old & new:
            raise ContractError("old and new classes overlap")
        if self.background_id in old | new:
            raise ContractError("background id collides with a class id")
        if self.unknown_id in old | new or self.unknown_id == self.background_id:
            raise ContractError("unknown id must be distinct from all other ids")
        if self.step_index < 0:
            raise ContractError("step index must be non-negative")
        if self.step_index == 0 and self.old_classes:
            raise ContractError("step 0 cannot have old classes")

    @property
    def known_classes(self) -> tuple[int, ...]:
        return self.old_classes + self.new_classes


def partition_for_step(schedule: TaskSchedule, step: int) -> ClassPartition:
    schedule.validate()
    return ClassPartition(
        old_classes=schedule.classes_before(step),
        new_classes=schedule.classes_at(step),
        step_index=step,
    )


def limited_count(ratio: float, n: int) -> int:
    """Ceiling of ratio*n, computed exactly for decimal ratios."""
    if n == 0:
        return 0
    return int(math.ceil(Fraction(str(ratio)) * n))


def split_for_step(
    dataset: Sequence[LabeledImage], schedule: TaskSchedule, step: int
) -> list[LabeledImage]:
    """Select and relabel the training images for one incremental step.

    Keeps images containing at least one pixel of a step-``step`` class
    (the disjoint protocol additionally drops images containing classes of
    later steps), rewrites every non-current class label to background,
    and for steps >= 1 keeps only the first ceil(data_ratio * n) matching
    images in dataset sequence order.  The input dataset is not modified.
    """
    schedule.validate()
    schedule._check_step(step)
    current = set(schedule.classes_at(step))
    future = set(schedule.classes_after(step))

    matching: list[LabeledImage] = []
    for img in dataset:
        present = set(np.unique(img.labels).tolist())
        if not (present & current):
            continue
        if schedule.protocol == "disjoint" and (present & future):
            continue
        matching.append(img)

    if step >= 1 and schedule.data_ratio < 1.0:
        matching = matching[: limited_count(schedule.data_ratio, len(matching))]

    out: list[LabeledImage] = []
    for img in matching:
        labels = img.labels.copy()
        keep = np.isin(labels, list(current)) | (labels == IGNORE_ID)
        labels[~keep] = BACKGROUND_ID
        out.append(LabeledImage(pixels=img.pixels, labels=labels))
    return out


def downsample_labels(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Majority-vote downsample of a label raster to ``out_hw``.

    Non-ignore values vote within each cell; ties go to the smallest
    value.  A cell is ignore only when every pixel in it is ignore.
    """
    h, w = labels.shape
    oh, ow = out_hw
    if h % oh != 0 or w % ow != 0:
        raise ContractError(f"cannot downsample {labels.shape} to {out_hw} evenly")
    fy, fx = h // oh, w // ow
    cells = labels.reshape(oh, fy, ow, fx).transpose(0, 2, 1, 3).reshape(oh, ow, fy * fx)
    values = np.unique(labels)
    values = np.sort(values[values != IGNORE_ID])
    if values.size == 0:
        return np.full((oh, ow), IGNORE_ID, dtype=labels.dtype)
    counts = np.stack([(cells == v).sum(axis=2) for v in values], axis=0)
    best = np.argmax(counts, axis=0)  # first max wins: smallest value on ties
    out = values[best].astype(labels.dtype)
    out[counts.sum(axis=0) == 0] = IGNORE_ID
    return out


# ---------------------------------------------------------------------------
# persistence: paired raster files plus a JSON manifest

_MANIFEST_NAME = "manifest.json"


def save_dataset(directory: str | pathlib.Path, images: Sequence[LabeledImage],
                 spec: SyntheticSceneSpec) -> pathlib.Path:
    """Write images as paired .npy rasters plus a manifest describing the spec."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "count": len(images),
        "height": spec.height,
        "width": spec.width,
        "noise": spec.noise,
        "seed": spec.seed,
        "shapes_per_image": list(spec.shapes_per_image),
        "classes": [
            {"id": c.class_id, "kind": c.kind, "color": list(c.color)} for c in spec.classes
        ],
    }
    (directory / _MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for i, img in enumerate(images):
        np.save(directory / f"image_{i:04d}.npy", img.pixels)
        np.save(directory / f"label_{i:04d}.npy", img.labels)
    return directory


def load_dataset(directory: str | pathlib.Path) -> tuple[list[LabeledImage], SyntheticSceneSpec]:
    directory = pathlib.Path(directory)
    manifest_path = directory / _MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigurationError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = SyntheticSceneSpec(
        height=manifest["height"],
        width=manifest["width"],
        classes=tuple(
            ShapeClass(c["id"], c["kind"], tuple(c["color"])) for c in manifest["classes"]
        ),
        shapes_per_image=tuple(manifest["shapes_per_image"]),
        noise=manifest["noise"],
        seed=manifest["seed"],
    )
    images = []
    for i in range(manifest["count"]):
        pixels = np.load(directory / f"image_{i:04d}.npy")
        labels = np.load(directory / f"label_{i:04d}.npy")
        images.append(LabeledImage(pixels=pixels, labels=labels))
    return images, spec
