"""A tiny differentiable segmentation network with activation capture.

The network is a stack of conv+ReLU stages (optionally followed by 2x2
average pooling) and a 1x1 classifier head.  Everything runs in float64
so gradients can be validated against central finite differences.  Head
row 0 is always the background; row 1+i belongs to ``class_ids[i]`` in
order of introduction.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import pathlib
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledImage
from .errors import ConfigurationError, ContractError

DTYPE = torch.float64


@dataclasses.dataclass(frozen=True)
class NetConfig:
    """Architecture knobs for :class:`SegNetwork`.

    The last stage is never pooled, so the final stage output is exactly
    the tensor the classifier head consumes (the decoupling stage).
    """

    in_channels: int = 3
    stage_channels: tuple[int, ...] = (8, 16, 32)
    pool_after_stage: tuple[bool, ...] = (True, True, False)
    kernel_size: int = 3
    head_init: str = "zero_bg_bias"  # init scheme for rows added by extend_head

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be positive")
        if not self.stage_channels:
            raise ConfigurationError("at least one stage is required")
        if len(self.pool_after_stage) != len(self.stage_channels):
            raise ConfigurationError("pool_after_stage must match stage_channels")
        if self.pool_after_stage[-1]:
            raise ConfigurationError("the final stage must not be pooled")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd")
        if self.head_init not in ("zero_bg_bias", "zero"):
            raise ConfigurationError(f"unknown head_init {self.head_init!r}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def downsample_factor(self) -> int:
        return 2 ** sum(bool(p) for p in self.pool_after_stage)

    def feature_hw(self, height: int, width: int) -> tuple[int, int]:
        """Spatial size of the final stage for a given input size."""
        f = self.downsample_factor()
        if height % f != 0 or width % f != 0:
            raise ContractError(f"input {height}x{width} not divisible by pooling factor {f}")
        return height // f, width // f


@dataclasses.dataclass
class FeatureBundle:
    """Everything captured from one forward pass.

    ``layer_outputs`` holds the output of every feature module in order;
    ``stages`` are the post-ReLU stage tensors (pre-pooling); ``features``
    is the final stage (the decoupling stage); ``embeddings`` flattens each
    channel of ``features`` row-major; ``soft_map`` is the per-pixel
    softmax over head rows.
    """

    input: torch.Tensor
    layer_outputs: list[torch.Tensor]
    stages: list[torch.Tensor]
    features: torch.Tensor
    embeddings: torch.Tensor
    logits: torch.Tensor
    soft_map: torch.Tensor


class SegNetwork(nn.Module):
    """Conv stack + 1x1 head, one output row per known class plus background."""

    def __init__(self, config: NetConfig, class_ids: Sequence[int], seed: int | Sequence[int] = 0):
        super().__init__()
        config.validate()
        if not class_ids:
            raise ConfigurationError("network needs at least one class")
        if len(set(class_ids)) != len(class_ids):
            raise ContractError("duplicate class ids")
        self.config = config
        self.class_ids: list[int] = list(class_ids)
        self.frozen = False

        rng = np.random.default_rng(seed)
        modules: list[nn.Module] = []
        stage_positions: list[int] = []
        in_ch = config.in_channels
        pad = config.kernel_size // 2
        for width, pool in zip(config.stage_channels, config.pool_after_stage):
            conv = nn.Conv2d(in_ch, width, config.kernel_size, padding=pad, dtype=DTYPE)
            self._init_conv(conv, rng)
            modules.append(conv)
            modules.append(nn.ReLU())
            stage_positions.append(len(modules) - 1)
            if pool:
                modules.append(nn.AvgPool2d(2))
            in_ch = width
        self.features = nn.ModuleList(modules)
        self.stage_positions = stage_positions
        self.head = nn.Conv2d(in_ch, 1 + len(self.class_ids), 1, dtype=DTYPE)
        self._init_conv(self.head, rng)

    @staticmethod
    def _init_conv(conv: nn.Conv2d, rng: np.random.Generator) -> None:
        fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(conv.weight.shape))
        with torch.no_grad():
            conv.weight.copy_(torch.from_numpy(w))
            conv.bias.zero_()

    # -- class bookkeeping ---------------------------------------------------

    @property
    def num_outputs(self) -> int:
        return self.head.out_channels

    @property
    def decouple_stage(self) -> int:
        return len(self.stage_positions) - 1

    def row_for_class(self, class_id: int) -> int:
        if class_id == 0:
            return 0
        try:
            return 1 + self.class_ids.index(class_id)
        except ValueError:
            raise ContractError(f"class {class_id} has no head row") from None

    def rows_from_labels(self, labels: np.ndarray) -> np.ndarray:
        """Map a label raster to head-row indices; sentinels map to -1."""
        rows = np.full(labels.shape, -1, dtype=np.int64)
        rows[labels == 0] = 0
        for i, cid in enumerate(self.class_ids):
            rows[labels == cid] = 1 + i
        known = np.isin(labels, [0, -1, -2] + self.class_ids)
        if not known.all():
            bad = np.unique(labels[~known])
            raise ContractError(f"labels contain ids unknown to this head: {bad.tolist()}")
        return rows

    # -- forward passes --------------------------------------------------------

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for module in self.features:
            x = module(x)
        return self.head(x)

    def forward_bundle(self, x: torch.Tensor) -> FeatureBundle:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"expected input (B,{self.config.in_channels},H,W), got {tuple(x.shape)}"
            )
        outs: list[torch.Tensor] = []
        cur = x
        for module in self.features:
            cur = module(cur)
            outs.append(cur)
        stages = [outs[p] for p in self.stage_positions]
        feats = outs[-1]
        logits = self.head(feats)
        return FeatureBundle(
            input=x,
            layer_outputs=outs,
            stages=stages,
            features=feats,
            embeddings=feats.flatten(2),
            logits=logits,
            soft_map=torch.softmax(logits, dim=1),
        )


def forward(net: SegNetwork, image: LabeledImage) -> FeatureBundle:
    """Forward a single labelled image, returning a batch-of-one bundle."""
    if image.pixels.shape[0] != net.config.in_channels:
        raise ContractError(
            f"image has {image.pixels.shape[0]} channels, net expects {net.config.in_channels}"
        )
    x = torch.tensor(image.pixels, dtype=DTYPE).unsqueeze(0)
    return net.forward_bundle(x)


def snapshot(net: SegNetwork) -> SegNetwork:
    """Deep-copy the network and freeze every parameter."""
    snap = copy.deepcopy(net)
    for p in snap.parameters():
        p.requires_grad_(False)
    snap.frozen = True
    return snap


def extend_head(net: SegNetwork, new_class_ids: Sequence[int]) -> SegNetwork:
    """Return a copy of ``net`` whose head has one extra row per new class.

    Existing rows are preserved bit-exactly.  New rows start at zero
    weights; under the ``zero_bg_bias`` scheme their bias copies the
    background row so new classes start indistinguishable from background.
    """
    if not new_class_ids:
        raise ContractError("extend_head needs at least one new class")
    if set(new_class_ids) & set(net.class_ids):
        raise ContractError("new class ids collide with existing ones")
    out = copy.deepcopy(net)
    out.frozen = False
    old_head = out.head
    new_head = nn.Conv2d(
        old_head.in_channels, old_head.out_channels + len(new_class_ids), 1, dtype=DTYPE
    )
    with torch.no_grad():
        new_head.weight.zero_()
        new_head.bias.zero_()
        new_head.weight[: old_head.out_channels] = old_head.weight
        new_head.bias[: old_head.out_channels] = old_head.bias
        if net.config.head_init == "zero_bg_bias":
            new_head.bias[old_head.out_channels:] = old_head.bias[0]
    out.head = new_head
    out.class_ids = net.class_ids + list(new_class_ids)
    for p in out.parameters():
        p.requires_grad_(True)
    return out


def predict(net: SegNetwork, pixels: np.ndarray) -> np.ndarray:
    """Predict a class-id raster at label resolution (nearest upsampling)."""
    single = pixels.ndim == 3
    x = torch.tensor(pixels[None] if single else pixels, dtype=DTYPE)
    with torch.no_grad():
        logits = net.forward(x)
        up = F.interpolate(logits, size=x.shape[2:], mode="nearest")
        rows = up.argmax(dim=1).numpy()
    lut = np.array([0] + net.class_ids, dtype=np.int16)
    out = lut[rows]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# parameter checkpointing (bit-exact on 64-bit values)


def save_params(path: str | pathlib.Path, net: SegNetwork) -> None:
    path = pathlib.Path(path)
    arrays = {f"param/{name}": p.detach().numpy() for name, p in net.named_parameters()}
    manifest = {
        "version": 1,
        "class_ids": net.class_ids,
        "net_config": dataclasses.asdict(net.config),
        "params": [
            {"name": name, "shape": list(p.shape), "dtype": str(p.dtype)}
            for name, p in net.named_parameters()
        ],
    }
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **arrays)


def load_params(path: str | pathlib.Path) -> SegNetwork:
    with np.load(pathlib.Path(path)) as blob:
        manifest = json.loads(bytes(blob["manifest"]).decode())
        if manifest.get("version") != 1:
            raise ConfigurationError(f"unsupported checkpoint version {manifest.get('version')}")
        cfg_dict = dict(manifest["net_config"])
        for key in ("stage_channels", "pool_after_stage"):
            cfg_dict[key] = tuple(cfg_dict[key])
        net = SegNetwork(NetConfig(**cfg_dict), manifest["class_ids"])
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(torch.from_numpy(blob[f"param/{name}"]))
    return net
