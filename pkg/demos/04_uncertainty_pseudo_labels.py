#!/usr/bin/env python3
"""Uncertainty-aware pseudo-labelling from a frozen first-step model.

After the initial step, new-step images only annotate the new classes;
everything else is background. The frozen model's confident and stable
predictions become pseudo labels for old classes, ambiguous background
pixels become an explicit unknown class (excluded from training), and
the rest stays background.
"""

import dataclasses

import numpy as np
import torch

from contseg import TaskSchedule, split_for_step
from contseg.harness import toy_config
from contseg.pseudo import certainty_maps
from contseg.trainer import advance_state, make_state, prepare_fused_labels, run_step

torch.set_num_threads(1)

cfg = toy_config()
train, _ = cfg.dataset.build()
schedule = TaskSchedule(steps=cfg.schedule_steps, protocol=cfg.protocol)

# step 0: learn the first four classes, then freeze
step0 = dataclasses.replace(cfg.train, epochs=20)
state = make_state(cfg.net, schedule.classes_at(0), step0)
state, _ = run_step(state, split_for_step(train, schedule, 0), step0)
state = advance_state(state, schedule.classes_at(1))

step1_images = split_for_step(train, schedule, 1)
print(f"step 1 trains on {len(step1_images)} images (only class 5 annotated)")

fused = prepare_fused_labels(state, step1_images, cfg.train)
hist = {"gt": 0, "pseudo": 0, "unknown": 0, "background": 0}
for f in fused:
    for key, val in f.histogram().items():
        hist[key] += val
total = sum(hist.values())
print("fused supervision provenance:")
for key, val in hist.items():
    print(f"  {key:10s} {val:6d} px ({100 * val / total:.1f}%)")

# per-pixel uncertainty of the frozen model on one image
img = step1_images[0]
x = torch.tensor(img.pixels, dtype=torch.float64).unsqueeze(0)
with torch.no_grad():
    logits = state.old_model.forward(x)
    up = torch.nn.functional.interpolate(logits, size=img.labels.shape, mode="nearest")
    soft = torch.softmax(up, dim=1)[0].numpy()
maps = certainty_maps(soft)
ratio = maps.stability_ratio()
print(f"image 0: certainty mean {maps.certainty.mean():.3f}, "
      f"stability ratio mean {ratio.mean():.3f}, "
      f"pixels below confidence {np.mean(soft.max(axis=0) < cfg.train.confidence_threshold):.1%}")
