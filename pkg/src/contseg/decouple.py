"""Channel-wise split of stage features into invariant and specific terms.

Channels whose flattened embeddings stay most similar between the frozen
old model and the current model are treated as carrying class-defining
(semantic-invariant) content; the remainder carries sample-specific
variation.  Similarity is cosine by default, averaged over the batch.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch

from .errors import CapabilityError, ContractError
from .net import FeatureBundle


SUPPORTED_METRICS = ("cosine",)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclasses.dataclass(frozen=True)
class ChannelSimilarity:
    """Per-channel similarity scores between two models at one stage."""

    scores: np.ndarray
    metric: str = "cosine"

    def __post_init__(self):
        if self.scores.ndim != 1:
            raise ContractError("similarity scores must be a vector")

    @property
    def num_channels(self) -> int:
        return self.scores.shape[0]


def _stage_tensor(bundle: FeatureBundle | torch.Tensor, stage: int | None) -> torch.Tensor:
    if isinstance(bundle, torch.Tensor):
        return bundle
    return bundle.features if stage is None else bundle.stages[stage]


def channel_similarity(
    current: FeatureBundle | torch.Tensor,
    old: FeatureBundle | torch.Tensor,
    metric: str = "cosine",
    stage: int | None = None,
) -> ChannelSimilarity:
    """Score each channel by the similarity of its flattened embeddings.

    Batched inputs average the per-channel score over the batch.
    Zero-norm channels score 0 under the cosine metric.
    """
    a = _stage_tensor(current, stage)
    b = _stage_tensor(old, stage)
    if a.dim() == 3:
        a = a.unsqueeze(0)
    if b.dim() == 3:
        b = b.unsqueeze(0)
    if a.shape != b.shape:
        raise ContractError(f"stage shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if metric not in SUPPORTED_METRICS:
        raise CapabilityError(f"unsupported similarity metric {metric!r}")
    with torch.no_grad():
        fa = a.flatten(2)
        fb = b.flatten(2)
        dot = (fa * fb).sum(dim=2)
        na = fa.norm(dim=2)
        nb = fb.norm(dim=2)
        denom = na * nb
        cos = torch.where(denom > 0, dot / torch.where(denom > 0, denom, torch.ones_like(denom)),
                          torch.zeros_like(dot))
        scores = cos.mean(dim=0).numpy()
    return ChannelSimilarity(scores=scores, metric=metric)


@dataclasses.dataclass
class DecoupledEmbedding:
    """A channel partition of one stage tensor.

    ``invariant_indices``/``specific_indices`` are ascending channel indices; their
    disjoint union is the full channel range and ``|invariant_indices|`` equals
    round-half-up(ratio * num_channels).
    """

    invariant_indices: tuple[int, ...]
    specific_indices: tuple[int, ...]
    invariant_tensor: torch.Tensor
    specific_tensor: torch.Tensor
    ratio: float

    def reconstruct(self) -> torch.Tensor:
        """Inverse-permute the concatenated parts back to the input layout."""
        dim = 0 if self.invariant_tensor.dim() == 3 else 1
        joined = torch.cat([self.invariant_tensor, self.specific_tensor], dim=dim)
        order = list(self.invariant_indices) + list(self.specific_indices)
        inverse = torch.empty(len(order), dtype=torch.long)
        inverse[torch.tensor(order, dtype=torch.long)] = torch.arange(len(order))
        return joined.index_select(dim, inverse)


def rank_and_split(
    sim: ChannelSimilarity, embedding: torch.Tensor, ratio: float
) -> DecoupledEmbedding:
    """Assign the most similar (stable) channels to the invariant term.

    Membership is the top round-half-up(ratio * N) channels by score, ties
    broken by lower channel index; both index lists are stored ascending.
    Scores are compared at 9-decimal precision so float noise between
    genuinely tied channels (identical models at a step start) cannot
    scramble the membership.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ContractError(f"ratio must lie in [0, 1], got {ratio}")
    n = sim.num_channels
    channel_dim = 0 if embedding.dim() == 3 else 1
    if embedding.shape[channel_dim] != n:
        raise ContractError(
            f"embedding has {embedding.shape[channel_dim]} channels, similarity has {n}"
        )
    m = round_half_up(ratio * n)
    order = np.argsort(-np.round(sim.scores, 9), kind="stable")
    invariant = tuple(sorted(int(i) for i in order[:m]))
    specific = tuple(sorted(int(i) for i in order[m:]))
    return DecoupledEmbedding(
        invariant_indices=invariant,
        specific_indices=specific,
        invariant_tensor=embedding.index_select(
            channel_dim, torch.tensor(invariant, dtype=torch.long)),
        specific_tensor=embedding.index_select(
            channel_dim, torch.tensor(specific, dtype=torch.long)),
        ratio=ratio,
    )
