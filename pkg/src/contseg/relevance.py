"""Layer-wise relevance propagation and the relevance-consistency loss.

Relevance is seeded at the head with the spatial logit map of one class
and redistributed backwards proportionally to each neuron's contribution
(input activation times weight).  Denominators are stabilized with a
sign-preserving epsilon; the mass absorbed by stabilization is tracked
per layer.  ReLU passes relevance through unchanged and average pooling
is treated as a linear layer.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapabilityError, ContractError
from .net import DTYPE, FeatureBundle, SegNetwork

log = logging.getLogger(__name__)

_ABSORB_LOG_THRESHOLD = 1e-9


def _stabilize(z: torch.Tensor, eps: float) -> torch.Tensor:
    """Sign-preserving epsilon offset, applied only to unhealthy denominators.

    Healthy denominators (|z| > 10*eps) divide exactly, so conservation
    holds to rounding error whenever no neuron in a layer is stabilized;
    the rare stabilized layers absorb mass, which callers log.
    """
    sign = torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))
    return torch.where(z.abs() <= 10.0 * eps, z + eps * sign, z)


def _relevant_min_denominator(z: torch.Tensor, r_out: torch.Tensor) -> float:
    """Smallest |denominator| among neurons that actually receive relevance.

    Dead activations (exact zeros after ReLU) produce exact-zero
    denominators but also carry exactly zero relevance, so they cannot
    absorb anything and are excluded from the health diagnostic.
    """
    with torch.no_grad():
        mask = r_out != 0
        if not bool(mask.any()):
            return float("inf")
        return float(z.abs()[mask].min().item())


def lrp_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    r_out: torch.Tensor,
    eps: float,
    padding: int = 0,
) -> tuple[torch.Tensor, float, float]:
    """Propagate relevance through a convolution (bias excluded from z).

    Returns the input relevance plus the layer's min |denominator| and the
    total mass absorbed by epsilon stabilization.
    """
    z = F.conv2d(x, weight, bias=None, padding=padding)
    if z.shape != r_out.shape:
        raise ContractError(f"relevance {tuple(r_out.shape)} does not match layer output "
                            f"{tuple(z.shape)}")
    zs = _stabilize(z, eps)
    s = r_out / zs
    c = F.conv_transpose2d(s, weight, bias=None, padding=padding)
    r_in = x * c
    min_denom = _relevant_min_denominator(z, r_out)
    absorbed = float((r_out.sum() - r_in.sum()).item())
    return r_in, min_denom, absorbed


def lrp_avg_pool(
    x: torch.Tensor, r_out: torch.Tensor, eps: float, kernel: int = 2
) -> tuple[torch.Tensor, float, float]:
    """Propagate relevance through average pooling as a linear layer."""
    z = F.avg_pool2d(x, kernel)
    if z.shape != r_out.shape:
        raise ContractError(f"relevance {tuple(r_out.shape)} does not match pooled output "
                            f"{tuple(z.shape)}")
    zs = _stabilize(z, eps)
    s = r_out / zs
    up = F.interpolate(s, scale_factor=kernel, mode="nearest")
    r_in = x * up / (kernel * kernel)
    min_denom = _relevant_min_denominator(z, r_out)
    absorbed = float((r_out.sum() - r_in.sum()).item())
    return r_in, min_denom, absorbed


@dataclasses.dataclass
class RelevanceField:
    """Relevance tensors produced by one backward propagation.

    ``layer_relevance`` maps each visited feature-module index to the
    relevance of that module's output (walked backwards from the head);
    ``stage_relevance`` indexes the same tensors by stage for the
    decoupling machinery.  ``layer_min_denominator``/``layer_absorbed``
    record, per propagated layer, the smallest pre-stabilization
    |denominator| among relevance-carrying neurons and the mass absorbed
    by stabilization.
    """

    class_id: int
    aggregation: str
    seed: torch.Tensor
    layer_relevance: dict[int, torch.Tensor]
    stage_relevance: dict[int, torch.Tensor]
    input_relevance: torch.Tensor | None
    layer_min_denominator: dict[str, float]
    layer_absorbed: dict[str, float]

    def seed_total(self) -> torch.Tensor:
        """Total seeded relevance per batch item."""
        return self.seed.sum(dim=(1, 2, 3))

    def total_at_stage(self, stage: int) -> torch.Tensor:
        return self.stage_relevance[stage].sum(dim=(1, 2, 3))


def propagate_relevance(
    net: SegNetwork,
    bundle: FeatureBundle,
    class_id: int,
    eps: float = 1e-6,
    to_stage: int | None = None,
) -> RelevanceField:
    """Redistribute one class's output relevance back through the network.

    The seed at the head is the spatial map of class logits (all other
    rows zero).  Propagation walks layer by layer toward the input and
    stops early once ``to_stage`` has been reached.  Unsupported layer
    kinds raise a :class:`CapabilityError` naming the layer.
    """
    row = net.row_for_class(class_id)
    # Seed with the bias-free head response: the Eq.-3 denominator excludes
    # bias (conservation needs that), and a bias-inclusive seed would divide
    # (z + bias) by z, which is singular wherever the response crosses zero.
    # The map is scaled by 1/(H*W) so the seeded total is the spatial mean
    # and per-class relevance keeps a resolution-independent magnitude.
    response = F.conv2d(bundle.features, net.head.weight, bias=None)
    seed = torch.zeros_like(bundle.logits)
    seed[:, row] = response[:, row] / (response.shape[2] * response.shape[3])

    stage_relevance: dict[int, torch.Tensor] = {}
    min_denoms: dict[str, float] = {}
    absorbed: dict[str, float] = {}
    stage_of_position = {pos: s for s, pos in enumerate(net.stage_positions)}

    # head: a 1x1 convolution reading the final stage
    r, dmin, dabs = lrp_conv(bundle.features, net.head.weight, seed, eps, padding=0)
    min_denoms["head"] = dmin
    absorbed["head"] = dabs
    top_stage = len(net.stage_positions) - 1
    stage_relevance[top_stage] = r
    if to_stage is not None and to_stage == top_stage:
        _log_absorbed(absorbed)
        return RelevanceField(class_id, "logit_sum", seed, stage_relevance, None,
                              min_denoms, absorbed)

    modules = list(net.features)
    outs = bundle.layer_outputs
    input_relevance: torch.Tensor | None = None
    for i in range(len(modules) - 1, -1, -1):
        module = modules[i]
        x_in = outs[i - 1] if i > 0 else bundle.input
        name = f"features.{i}"
        if isinstance(module, nn.ReLU):
            pass  # identity rule
        elif isinstance(module, nn.Conv2d):
            r, dmin, dabs = lrp_conv(x_in, module.weight, r, eps,
                                     padding=module.padding[0])
            min_denoms[name] = dmin
            absorbed[name] = dabs
        elif isinstance(module, nn.AvgPool2d):
            r, dmin, dabs = lrp_avg_pool(x_in, r, eps, kernel=int(module.kernel_size))
            min_denoms[name] = dmin
            absorbed[name] = dabs
        else:
            raise CapabilityError(
                f"relevance propagation does not support layer {name} "
                f"({type(module).__name__})"
            )
        if i > 0 and (i - 1) in stage_of_position:
            s = stage_of_position[i - 1]
            stage_relevance[s] = r
            if to_stage is not None and s == to_stage:
                _log_absorbed(absorbed)
                return RelevanceField(class_id, "logit_sum", seed, stage_relevance, None,
                                      min_denoms, absorbed)
    input_relevance = r
    _log_absorbed(absorbed)
    return RelevanceField(class_id, "logit_sum", seed, stage_relevance, input_relevance,
                          min_denoms, absorbed)


def _log_absorbed(absorbed: dict[str, float]) -> None:
    for name, mass in absorbed.items():
        if abs(mass) > _ABSORB_LOG_THRESHOLD:
            log.debug("relevance stabilization absorbed %.3e at %s", mass, name)


def class_relevance(field: RelevanceField, stage: int | None = None) -> torch.Tensor:
    """Per-channel relevance vector: spatial sum at the decoupling stage.

    Returns a (batch, channels) tensor; pass ``stage`` to read another
    recorded stage.
    """
    if not field.stage_relevance:
        raise ContractError("field does not reach any stage")
    if stage is None:
        stage = max(field.stage_relevance)
    if stage not in field.stage_relevance:
        raise ContractError(f"field does not contain stage {stage}")
    return field.stage_relevance[stage].sum(dim=(2, 3))


def consistency_gap(g_old: torch.Tensor, g_new: torch.Tensor) -> torch.Tensor:
    """Squared L2 gap between two (batch, channels) relevance vectors,
    averaged over the batch."""
    if g_old.shape != g_new.shape:
        raise ContractError(f"relevance vectors differ: {tuple(g_old.shape)} vs "
                            f"{tuple(g_new.shape)}")
    return ((g_old - g_new) ** 2).sum(dim=1).mean()


def consistency_loss(
    old_net: SegNetwork,
    new_net: SegNetwork,
    x: torch.Tensor,
    old_classes: Sequence[int],
    eps: float = 1e-6,
) -> torch.Tensor:
    """Mean squared distance between old/new per-class relevance vectors.

    Returns 0 when there are no old classes (the step-0 convention).  The
    result is differentiable with respect to the current model only; the
    old model's vectors are computed without gradient tracking.
    """
    if not old_classes:
        return torch.zeros((), dtype=DTYPE)
    stage = new_net.decouple_stage
    bundle_new = new_net.forward_bundle(x)
    with torch.no_grad():
        bundle_old = old_net.forward_bundle(x)
    total = torch.zeros((), dtype=DTYPE)
    for c in old_classes:
        field_new = propagate_relevance(new_net, bundle_new, c, eps=eps, to_stage=stage)
        with torch.no_grad():
            field_old = propagate_relevance(old_net, bundle_old, c, eps=eps, to_stage=stage)
        total = total + consistency_gap(class_relevance(field_old, stage),
                                        class_relevance(field_new, stage))
    return total / len(old_classes)


def save_relevance_dump(path, vectors: dict[int, torch.Tensor]) -> None:
    """Write per-class relevance vectors as JSON (interpretability dump)."""
    import json
    import pathlib

    payload = {str(c): g.detach().numpy().tolist() for c, g in vectors.items()}
    pathlib.Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
