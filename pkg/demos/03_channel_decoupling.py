#!/usr/bin/env python3
"""Split stage channels into invariant and specific terms, then build prototypes.

Two models that share an architecture but differ in weights agree on
some channels more than others; the most similar (stable) channels are
treated as class-defining content. Prototypes are masked average pools
of those invariant channels, maintained as running averages.
"""

import numpy as np
import torch

from contseg import (
    ClassPartition,
    NetConfig,
    SegNetwork,
    SyntheticSceneSpec,
    channel_similarity,
    default_universe,
    generate_dataset,
    rank_and_split,
    snapshot,
)
from contseg.data import downsample_labels
from contseg.distill import PrototypeStore, update_prototypes

torch.set_num_threads(1)

spec = SyntheticSceneSpec(height=16, width=16, classes=default_universe(3), seed=5)
images = generate_dataset(spec, count=8)
x = torch.tensor(np.stack([img.pixels for img in images]), dtype=torch.float64)

cfg = NetConfig(in_channels=3, stage_channels=(6, 8), pool_after_stage=(True, False))
old_model = snapshot(SegNetwork(cfg, class_ids=[1, 2, 3], seed=1))
new_model = SegNetwork(cfg, class_ids=[1, 2, 3], seed=1)
with torch.no_grad():  # simulate drift from a training step
    for p in new_model.parameters():
        p.add_(torch.from_numpy(np.random.default_rng(9).normal(0, 0.05, tuple(p.shape))))

new_bundle = new_model.forward_bundle(x)
with torch.no_grad():
    old_bundle = old_model.forward_bundle(x)

sim = channel_similarity(new_bundle, old_bundle)
print("per-channel cosine similarity:", np.round(sim.scores, 3).tolist())

dec = rank_and_split(sim, new_bundle.features, ratio=0.6)
print(f"invariant channels ({len(dec.invariant_indices)}): {dec.invariant_indices}")
print(f"specific  channels ({len(dec.specific_indices)}): {dec.specific_indices}")
print("reconstruction bit-exact:", bool(torch.equal(dec.reconstruct(), new_bundle.features)))

# prototypes: running averages of invariant channels under the label masks
partition = ClassPartition(old_classes=(), new_classes=(1, 2, 3), step_index=0)
store = PrototypeStore(stage=1, dim=len(dec.invariant_indices), momentum=0.9)
labels = np.stack([
    downsample_labels(img.labels, tuple(new_bundle.features.shape[2:])) for img in images
])
update_prototypes(store, dec, labels, partition)
store.finish_step()
for k in sorted(store.frozen):
    p = store.frozen[k]
    print(f"prototype class {k}: norm {p.norm().item():.3f}, "
          f"dist to background {((p - store.background) ** 2).sum().item():.3f}")
