import math

import numpy as np
import pytest
import torch

from contseg.data import ClassPartition
from contseg.decouple import DecoupledEmbedding
from contseg.distill import (
    PrototypeStore,
    TripletBatch,
    batch_class_means,
    build_triplets,
    distillation_loss,
    feature_preserving_loss,
    prototype_matching_loss,
    update_prototypes,
)
from contseg.errors import ContractError
from contseg.net import DTYPE


def vec(*values):
    return torch.tensor(values, dtype=DTYPE)


def make_split(tensor):
    c = tensor.shape[1]
    return DecoupledEmbedding(
        invariant_indices=tuple(range(c)), specific_indices=(), invariant_tensor=tensor,
        specific_tensor=tensor[:, :0], ratio=1.0,
    )


def part_step1(old=(1, 2), new=(3,)):
    return ClassPartition(old_classes=old, new_classes=new, step_index=1)


# -- masked average pooling --------------------------------------------------


def test_constant_field_prototype():
    feats = torch.full((1, 3, 2, 2), 0.0, dtype=DTYPE)
    feats[0, 0], feats[0, 1], feats[0, 2] = 1.0, 2.0, 3.0
    labels = np.full((1, 2, 2), 5, dtype=np.int16)
    means = batch_class_means(feats, labels, [5])
    assert means[5].tolist() == [1.0, 2.0, 3.0]


def test_two_pixel_masked_mean():
    feats = torch.zeros((1, 2, 1, 2), dtype=DTYPE)
    feats[0, :, 0, 0] = vec(1.0, 0.0)
    feats[0, :, 0, 1] = vec(0.0, 1.0)
    labels = np.full((1, 1, 2), 4, dtype=np.int16)
    means = batch_class_means(feats, labels, [4])
    assert means[4].tolist() == [0.5, 0.5]


def test_masked_mean_is_mean_over_images():
    # image A: one pixel at 0.0; image B: three pixels at 1.0
    feats = torch.zeros((2, 1, 1, 4), dtype=DTYPE)
    feats[1, 0] = 1.0
    labels = np.full((2, 1, 4), -1, dtype=np.int16)
    labels[0, 0, 0] = 7
    labels[1, 0, :3] = 7
    means = batch_class_means(feats, labels, [7])
    assert means[7].item() == pytest.approx(0.5)  # (0 + 1) / 2, not 3/4


def test_absent_class_skipped():
    feats = torch.ones((1, 2, 2, 2), dtype=DTYPE)
    labels = np.zeros((1, 2, 2), dtype=np.int16)
    store = PrototypeStore(stage=0, dim=2, momentum=0.5)
    store.prototypes[9] = vec(5.0, 5.0)
    update_prototypes(store, make_split(feats), labels, part_step1(old=(9,), new=(1,)))
    assert store.prototypes[9].tolist() == [5.0, 5.0]
    assert store.counts.get(9, 0) == 0


def test_ema_blend_and_momentum_zero():
    feats = torch.ones((1, 1, 2, 2), dtype=DTYPE)
    labels = np.full((1, 2, 2), 1, dtype=np.int16)
    part = part_step1(old=(), new=(1,))
    part = ClassPartition(old_classes=(), new_classes=(1,), step_index=0)
    store = PrototypeStore(stage=0, dim=1, momentum=0.0)
    update_prototypes(store, make_split(feats), labels, part)
    assert store.prototypes[1].item() == 1.0
    update_prototypes(store, make_split(feats * 3.0), labels, part)
    assert store.prototypes[1].item() == 3.0  # momentum 0: pure batch mean
    blended = PrototypeStore(stage=0, dim=1, momentum=0.9)
    update_prototypes(blended, make_split(feats), labels, part)
    update_prototypes(blended, make_split(feats * 3.0), labels, part)
    assert blended.prototypes[1].item() == pytest.approx(0.9 * 1.0 + 0.1 * 3.0)


def test_update_dimension_mismatch():
    feats = torch.ones((1, 3, 2, 2), dtype=DTYPE)
    store = PrototypeStore(stage=0, dim=2, momentum=0.5)
    with pytest.raises(ContractError):
        update_prototypes(store, make_split(feats), np.zeros((1, 2, 2), dtype=np.int16),
                          part_step1())


def test_unknown_accumulator():
    feats = torch.full((1, 1, 2, 2), 4.0, dtype=DTYPE)
    labels = np.full((1, 2, 2), -2, dtype=np.int16)
    store = PrototypeStore(stage=0, dim=1, momentum=0.5)
    update_prototypes(store, make_split(feats), labels, part_step1())
    assert store.unknown.item() == 4.0
    assert store.unknown_count == 1


# -- prototype matching ------------------------------------------------------


def test_matching_intra_zero_when_prototypes_match():
    store = PrototypeStore(stage=0, dim=2, momentum=0.9)
    store.frozen = {1: vec(1.0, 0.0), 2: vec(0.0, 1.0)}
    store.prototypes = {1: vec(1.0, 0.0), 2: vec(0.0, 1.0)}
    store.background = vec(10.0, 10.0)
    loss = prototype_matching_loss(store, part_step1())
    # intra is exactly 0; only the inter repulsion remains
    d12 = 2.0
    d_bg1 = (1 - 10) ** 2 + 10 ** 2
    d_bg2 = 10 ** 2 + (1 - 10) ** 2
    expect = ((1 / (d12 + 1e-6) + 1 / (d_bg1 + 1e-6))
              + (1 / (d12 + 1e-6) + 1 / (d_bg2 + 1e-6))) / 2
    assert float(loss) == pytest.approx(expect, rel=1e-9)
    # and strictly positive intra once any old prototype moves
    store.prototypes[1] = vec(1.5, 0.0)
    moved = prototype_matching_loss(store, part_step1())
    assert float(moved) > float(loss)


def test_matching_step0_has_no_intra_term():
    store = PrototypeStore(stage=0, dim=2, momentum=0.9)
    store.prototypes = {1: vec(1.0, 0.0)}
    part = ClassPartition(old_classes=(), new_classes=(1,), step_index=0)
    loss = prototype_matching_loss(store, part)
    assert float(loss) == pytest.approx(1.0 / (1.0 + 1e-6))  # only bg repulsion


def test_matching_inter_spec_arithmetic():
    # p_1=(1,0), frozen p_2=(0,1), p_bg=(0,0):
    # contribution for k=1 is 1/(2+eps) + 1/(1+eps)
    store = PrototypeStore(stage=0, dim=2, momentum=0.9)
    store.prototypes = {1: vec(1.0, 0.0)}
    store.frozen = {2: vec(0.0, 1.0)}
    store.background = vec(0.0, 0.0)
    part = part_step1(old=(2,), new=(1,))
    loss = prototype_matching_loss(store, part, eps=1e-6)
    assert float(loss) == pytest.approx(1 / (2 + 1e-6) + 1 / (1 + 1e-6), rel=1e-12)


def test_matching_missing_frozen_old_class():
    store = PrototypeStore(stage=0, dim=2, momentum=0.9)
    with pytest.raises(ContractError):
        prototype_matching_loss(store, part_step1())


def test_matching_zero_dim_store():
    store = PrototypeStore(stage=0, dim=0, momentum=0.9)
    assert float(prototype_matching_loss(store, part_step1(old=(), new=(1,)))) == 0.0


def test_matching_differentiable_through_current_prototypes():
    feats = torch.ones((1, 2, 2, 2), dtype=DTYPE, requires_grad=True)
    labels = np.full((1, 2, 2), 1, dtype=np.int16)
    store = PrototypeStore(stage=0, dim=2, momentum=0.5)
    store.frozen = {1: vec(0.0, 0.0)}
    store.start_step()
    update_prototypes(store, make_split(feats), labels, part_step1(old=(1,), new=(2,)))
    loss = prototype_matching_loss(store, part_step1(old=(1,), new=(2,)))
    loss.backward()
    assert feats.grad is not None and feats.grad.abs().sum() > 0


# -- feature preserving ------------------------------------------------------


def triplet(d_ap, d_an, margin):
    return TripletBatch(
        class_id=1, negative_class_id=2,
        anchor=vec(0.0), positive=vec(math.sqrt(d_ap)), negative=vec(math.sqrt(d_an)),
        margin=margin,
    )


def test_preserving_hinge_satisfied_margin():
    old = torch.zeros((1, 1, 2, 2), dtype=DTYPE)
    loss = feature_preserving_loss(old, old.clone(), [triplet(0.2, 0.9, 0.5)])
    assert float(loss) == pytest.approx(0.0)


def test_preserving_hinge_violated_margin():
    old = torch.zeros((1, 1, 2, 2), dtype=DTYPE)
    loss = feature_preserving_loss(old, old.clone(), [triplet(0.9, 0.2, 0.5)])
    assert float(loss) == pytest.approx(0.9 - 0.2 + 0.5)


def test_preserving_identical_bundles_and_anchor_positives():
    # new bundle equals old and positives equal anchors: global term 0 and the
    # hinge per class is max(margin - d(a, n), 0)
    old = torch.zeros((1, 1, 2, 2), dtype=DTYPE)
    t = TripletBatch(class_id=1, negative_class_id=2, anchor=vec(1.0),
                     positive=vec(1.0), negative=vec(2.0), margin=0.5)
    loss = feature_preserving_loss(old, old.clone(), [t])
    assert float(loss) == pytest.approx(max(0.5 - 1.0, 0.0))


def test_preserving_without_triplets_returns_global_term(rng):
    old = torch.tensor(rng.normal(size=(1, 2, 2, 2)), dtype=DTYPE)
    new = torch.tensor(rng.normal(size=(1, 2, 2, 2)), dtype=DTYPE)
    loss = feature_preserving_loss(old, new, [])
    assert float(loss) == pytest.approx(float(((new - old) ** 2).mean()))


def test_preserving_never_negative(rng):
    for _ in range(20):
        old = torch.tensor(rng.normal(size=(1, 2, 2, 2)), dtype=DTYPE)
        new = torch.tensor(rng.normal(size=(1, 2, 2, 2)), dtype=DTYPE)
        t = triplet(float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), 0.2)
        assert float(feature_preserving_loss(old, new, [t])) >= 0.0


def test_preserving_shape_mismatch(rng):
    with pytest.raises(ContractError):
        feature_preserving_loss(torch.zeros((1, 2, 2, 2)), torch.zeros((1, 3, 2, 2)), [])


def test_triplet_rejects_same_class_negative():
    with pytest.raises(ContractError):
        TripletBatch(class_id=1, negative_class_id=1, anchor=vec(0.0),
                     positive=vec(0.0), negative=vec(0.0), margin=0.1)


def test_build_triplets_hardest_negative():
    anchors = {1: vec(0.0, 0.0), 2: vec(5.0, 5.0)}
    positives = {1: vec(0.1, 0.0), 2: vec(5.0, 5.1), 3: vec(0.3, 0.0)}
    triplets = build_triplets(anchors, positives, margin=0.2, anchor_classes=[1, 2])
    by_class = {t.class_id: t for t in triplets}
    assert set(by_class) == {1, 2}
    # the negative for class 1 is the current mean closest to its anchor (class 3)
    assert by_class[1].negative_class_id == 3
    assert by_class[2].negative_class_id == 3


def test_build_triplets_skips_new_class_anchors():
    anchors = {1: vec(0.0), 3: vec(1.0)}
    positives = {1: vec(0.0), 3: vec(1.0)}
    triplets = build_triplets(anchors, positives, margin=0.1, anchor_classes=[1])
    assert [t.class_id for t in triplets] == [1]


def test_build_triplets_single_class_has_no_negative():
    anchors = {1: vec(0.0)}
    positives = {1: vec(0.0)}
    assert build_triplets(anchors, positives, margin=0.1) == []


# -- aggregation -------------------------------------------------------------


def test_dd_loss_single_stage():
    assert float(distillation_loss([0.4], [0.6])) == pytest.approx(1.0)


def test_dd_loss_mean_over_stages():
    assert float(distillation_loss([0.4, 0.0], [0.6, 0.0])) == pytest.approx(0.5)


def test_dd_loss_mean_invariance():
    for k in (1, 2, 5):
        v = 0.7
        assert float(distillation_loss([v] * k, [v] * k)) == pytest.approx(2 * v)


def test_dd_loss_contract_errors():
    with pytest.raises(ContractError):
        distillation_loss([], [])
    with pytest.raises(ContractError):
        distillation_loss([0.1], [0.1, 0.2])


# -- store lifecycle ---------------------------------------------------------


def test_finish_step_freezes_and_recomputes_background():
    store = PrototypeStore(stage=0, dim=2, momentum=0.9)
    store.prototypes = {1: vec(1.0, 0.0), 2: vec(0.0, 1.0)}
    store.unknown = vec(2.0, 2.0)
    store.unknown_count = 3
    store.finish_step()
    assert store.frozen[1].tolist() == [1.0, 0.0]
    assert store.background.tolist() == [1.0, 1.0]  # mean of the three vectors
    store.start_step()
    assert store.unknown is None and store.unknown_count == 0
    assert store.prototypes[1].tolist() == [1.0, 0.0]


def test_store_roundtrip_through_arrays():
    store = PrototypeStore(stage=1, dim=2, momentum=0.7)
    store.prototypes = {1: vec(1.0, 2.0)}
    store.frozen = {1: vec(0.5, 0.5)}
    store.counts = {1: 4}
    store.unknown = vec(3.0, 3.0)
    store.unknown_count = 2
    store.finish_step()
    arrays = store.to_arrays()
    loaded = PrototypeStore.from_arrays(arrays)
    assert loaded.stage == 1 and loaded.dim == 2 and loaded.momentum == 0.7
    assert torch.equal(loaded.prototypes[1], store.prototypes[1])
    assert torch.equal(loaded.frozen[1], store.frozen[1])
    assert torch.equal(loaded.background, store.background)
    assert loaded.counts[1] == 4
    assert loaded.unknown_count == 2
