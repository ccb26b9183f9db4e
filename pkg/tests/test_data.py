import numpy as np
import pytest

from contseg.data import (
    BACKGROUND_ID,
    IGNORE_ID,
    ClassPartition,
    LabeledImage,
    SyntheticSceneSpec,
    TaskSchedule,
    default_universe,
    downsample_labels,
    generate_dataset,
    limited_count,
    load_dataset,
    partition_for_step,
    save_dataset,
    split_for_step,
)
from contseg.errors import ConfigurationError, ContractError, ProtocolError


def make_spec(n_classes=2, seed=7, size=32):
    return SyntheticSceneSpec(height=size, width=size, classes=default_universe(n_classes),
                              seed=seed)


def test_generator_contract():
    images = generate_dataset(make_spec(), count=8)
    assert len(images) == 8
    for img in images:
        present = set(np.unique(img.labels).tolist())
        assert BACKGROUND_ID in present
        assert present - {BACKGROUND_ID}, "each image must contain at least one shape"
        assert img.pixels.shape == (3, 32, 32)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_generator_determinism():
    a = generate_dataset(make_spec(), count=6)
    b = generate_dataset(make_spec(), count=6)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels)
        assert np.array_equal(x.labels, y.labels)


def test_generator_seed_sensitivity():
    a = generate_dataset(make_spec(seed=7), count=4)
    b = generate_dataset(make_spec(seed=8), count=4)
    assert not all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_generator_rejects_empty_universe():
    spec = SyntheticSceneSpec(classes=())
    with pytest.raises(ConfigurationError):
        generate_dataset(spec, count=2)
    with pytest.raises(ConfigurationError):
        generate_dataset(make_spec(), count=0)


def test_generator_class_coverage():
    spec = make_spec(n_classes=3)
    images = generate_dataset(spec, count=4 * 3)
    seen = set()
    for img in images:
        seen |= set(np.unique(img.labels).tolist())
    assert set(spec.class_ids) <= seen


def test_labeled_image_shape_validation():
    with pytest.raises(ContractError):
        LabeledImage(pixels=np.zeros((3, 8, 8)), labels=np.zeros((4, 8), dtype=np.int16))


def test_partition_invariants():
    with pytest.raises(ContractError):
        ClassPartition(old_classes=(1,), new_classes=(1, 2), step_index=1)
    with pytest.raises(ContractError):
        ClassPartition(old_classes=(1,), new_classes=(2,), step_index=0)
    with pytest.raises(ContractError):
        ClassPartition(old_classes=(), new_classes=(0,), step_index=0)
    part = partition_for_step(TaskSchedule(steps=((1, 2), (3,))), 1)
    assert part.old_classes == (1, 2)
    assert part.new_classes == (3,)
    assert part.known_classes == (1, 2, 3)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        TaskSchedule(steps=((1, 2), (2,))).validate()
    with pytest.raises(ConfigurationError):
        TaskSchedule(steps=((1,),), protocol="sequential").validate()
    with pytest.raises(ConfigurationError):
        TaskSchedule(steps=((1,),), data_ratio=0.0).validate()


def test_limited_count_exact_decimal_arithmetic():
    assert limited_count(0.5, 487) == 244
    assert limited_count(0.1, 487) == 49
    # 0.1 * 490 is 49.0000...01 in binary floats; the exact path must not round up
    assert limited_count(0.1, 490) == 49
    assert limited_count(1.0, 123) == 123
    assert limited_count(0.25, 1) == 1


def make_sequence_dataset(labels_per_image):
    out = []
    for i, label_value in enumerate(labels_per_image):
        labels = np.full((4, 4), label_value, dtype=np.int16)
        labels[0, 0] = BACKGROUND_ID
        out.append(LabeledImage(pixels=np.full((3, 4, 4), i / 100.0), labels=labels))
    return out


def test_split_identity_ratio_and_relabel():
    schedule = TaskSchedule(steps=((1,), (2,)), data_ratio=1.0)
    data = make_sequence_dataset([2] * 10)
    out = split_for_step(data, schedule, 1)
    assert len(out) == 10
    for img in out:
        values = set(np.unique(img.labels).tolist())
        assert values <= {BACKGROUND_ID, 2}


def test_split_relabels_old_classes_to_background():
    schedule = TaskSchedule(steps=((1,), (2,)))
    labels = np.array([[1, 2], [2, IGNORE_ID]], dtype=np.int16)
    data = [LabeledImage(pixels=np.zeros((3, 2, 2)), labels=labels)]
    out = split_for_step(data, schedule, 1)
    assert np.array_equal(out[0].labels,
                          np.array([[BACKGROUND_ID, 2], [2, IGNORE_ID]], dtype=np.int16))


def test_split_prefix_property():
    schedule = TaskSchedule(steps=((1,), (2,)), data_ratio=0.3)
    data = make_sequence_dataset([2, 1, 2, 2, 1, 2, 2, 2])  # 6 matching images
    out = split_for_step(data, schedule, 1)
    assert len(out) == limited_count(0.3, 6) == 2
    # the retained images are the first matching ones in sequence order
    assert [img.pixels[0, 0, 1] for img in out] == [0.00, 0.02]


def test_split_is_pure():
    schedule = TaskSchedule(steps=((1,), (2,)))
    data = make_sequence_dataset([2, 2])
    before = [img.labels.copy() for img in data]
    split_for_step(data, schedule, 1)
    for img, saved in zip(data, before):
        assert np.array_equal(img.labels, saved)


def test_split_ratio_not_applied_at_step_zero():
    schedule = TaskSchedule(steps=((1,), (2,)), data_ratio=0.5)
    data = make_sequence_dataset([1] * 10)
    assert len(split_for_step(data, schedule, 0)) == 10


def test_split_disjoint_drops_future_class_images():
    schedule = TaskSchedule(steps=((1,), (2,), (3,)), protocol="disjoint")
    labels_a = np.array([[2, 0], [0, 0]], dtype=np.int16)
    labels_b = np.array([[2, 3], [0, 0]], dtype=np.int16)  # contains a future class
    data = [LabeledImage(pixels=np.zeros((3, 2, 2)), labels=l) for l in (labels_a, labels_b)]
    out = split_for_step(data, schedule, 1)
    assert len(out) == 1
    overlapped = TaskSchedule(steps=((1,), (2,), (3,)), protocol="overlapped")
    assert len(split_for_step(data, overlapped, 1)) == 2


def test_split_step_out_of_range():
    schedule = TaskSchedule(steps=((1,),))
    with pytest.raises(ProtocolError):
        split_for_step([], schedule, 3)


def test_downsample_majority_vote():
    labels = np.array(
        [[1, 1, 2, 2],
         [1, 0, 2, 2],
         [0, 0, IGNORE_ID, IGNORE_ID],
         [0, 0, IGNORE_ID, IGNORE_ID]], dtype=np.int16)
    out = downsample_labels(labels, (2, 2))
    assert out[0, 0] == 1       # 3 votes vs 1
    assert out[0, 1] == 2       # unanimous
    assert out[1, 0] == 0
    assert out[1, 1] == IGNORE_ID  # entirely ignore


def test_downsample_tie_breaks_to_smallest_value():
    labels = np.array([[1, 2], [2, 1]], dtype=np.int16)
    assert downsample_labels(labels, (1, 1))[0, 0] == 1


def test_downsample_shape_mismatch():
    with pytest.raises(ContractError):
        downsample_labels(np.zeros((5, 4), dtype=np.int16), (2, 2))


def test_dataset_roundtrip(tmp_path):
    spec = make_spec(n_classes=3, size=16)
    images = generate_dataset(spec, count=5)
    save_dataset(tmp_path / "ds", images, spec)
    loaded, loaded_spec = load_dataset(tmp_path / "ds")
    assert loaded_spec == spec
    assert len(loaded) == 5
    for a, b in zip(images, loaded):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.labels, b.labels)


def test_load_dataset_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path)
