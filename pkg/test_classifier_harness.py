#!/usr/bin/env python3
"""
Tests for classifier_harness: curriculum schedule, augmentation, training
"""

import math

import numpy as np
import pandas as pd
import pytest

from classifier_harness import (
    AugmentationPolicy,
    ClassifierConfig,
    ClassifierData,
    CurriculumSchedule,
    apply_traditional_augmentation,
    augment_pixels,
    curriculum_batch,
    learning_rate_at,
    real_count,
    real_fraction,
    score_patches,
    train_classifier,
    write_scores,
)
from errors import ConfigError, DataError, InvalidInputError
from patch_pipeline import MALIGNANT, NON_MALIGNANT
from conftest import make_patch

TINY = ClassifierConfig(batch_size=4, iterations=6, validate_every=3, widths=(4, 4))


def test_real_fraction_schedule():
    assert real_fraction(0) == 0.5
    assert real_fraction(999) == 0.5
    assert real_fraction(1000) == pytest.approx(0.6)
    assert real_fraction(2500) == pytest.approx(0.72)
    assert real_fraction(9999) == 0.9


def test_additive_schedule():
    schedule = CurriculumSchedule(mode="additive")
    assert real_fraction(1000, schedule) == pytest.approx(0.7)
    assert real_fraction(2500, schedule) == pytest.approx(0.9)


def test_negative_iteration():
    with pytest.raises(InvalidInputError):
        real_fraction(-1)


@pytest.mark.parametrize("fraction, real", [(0.5, 16), (0.9, 29), (1.0, 32), (0.0, 0)])
def test_real_count_rounds_half_up(fraction, real):
    assert real_count(32, fraction) == real


def _pools():
    real = [make_patch(NON_MALIGNANT, seed=i) for i in range(3)]
    synthetic = [make_patch(MALIGNANT, seed=i, synthetic=True) for i in range(3)]
    return real, synthetic


def test_curriculum_batch_composition():
    real, synthetic = _pools()
    schedule = CurriculumSchedule()
    first = curriculum_batch(real, synthetic, 0, 32, schedule, seed=0)
    late = curriculum_batch(real, synthetic, 9999, 32, schedule, seed=0)
    assert sum(not p.synthetic for p in first) == 16
    assert sum(p.synthetic for p in first) == 16
    assert sum(not p.synthetic for p in late) == 29
    assert sum(p.synthetic for p in late) == 3


def test_curriculum_batch_counts_over_a_full_run():
    real, synthetic = _pools()
    schedule = CurriculumSchedule()
    for it in range(10_000):
        batch = curriculum_batch(real, synthetic, it, 32, schedule, seed=1)
        assert sum(not p.synthetic for p in batch) == real_count(32, real_fraction(it, schedule))


def test_all_real_batches_without_schedule():
    real, _ = _pools()
    batch = curriculum_batch(real, (), 5, 8, None, seed=0)
    assert len(batch) == 8 and not any(p.synthetic for p in batch)


def test_empty_synthetic_pool_is_a_config_error():
    real, _ = _pools()
    with pytest.raises(ConfigError, match="data.synthetic"):
        curriculum_batch(real, [], 0, 8, CurriculumSchedule(), seed=0)


def test_learning_rate_decay():
    config = ClassifierConfig()
    assert learning_rate_at(0, config) == 1e-5
    assert learning_rate_at(1999, config) == 1e-5
    assert learning_rate_at(2000, config) == pytest.approx(9e-6)
    assert learning_rate_at(4000, config) == pytest.approx(8.1e-6)


def test_identity_augmentation():
    patch = make_patch(MALIGNANT, seed=4)
    out = apply_traditional_augmentation(patch, AugmentationPolicy.identity(), seed=0)
    assert np.array_equal(out.image.pixels, patch.image.pixels)
    assert np.array_equal(out.mask.pixels, patch.mask.pixels)


def test_flip_is_an_involution():
    pixels = np.random.default_rng(0).random((9, 7)).astype(np.float32)
    once = augment_pixels(pixels, 0.0, True, 1.0)
    assert np.array_equal(once, pixels[:, ::-1])
    assert np.array_equal(augment_pixels(once, 0.0, True, 1.0), pixels)


def test_rotation_then_scale_moves_a_point_as_expected():
    pixels = np.zeros((65, 65), dtype=np.float32)
    pixels[42, 32] = 1.0
    out = augment_pixels(pixels, 30.0, False, 1.25)
    row, col = np.unravel_index(np.argmax(out), out.shape)
    assert abs(row - 43) <= 1 and abs(col - 38) <= 1


def test_augmentation_keeps_masks_binary_and_is_seeded():
    patch = make_patch(MALIGNANT, seed=5, size=32)
    a = apply_traditional_augmentation(patch, AugmentationPolicy(), seed=3)
    b = apply_traditional_augmentation(patch, AugmentationPolicy(), seed=3)
    assert set(np.unique(a.mask.pixels)) <= {0, 1}
    assert np.array_equal(a.image.pixels, b.image.pixels)
    assert a.label == patch.label


def _data(with_synthetic=False):
    train = [make_patch(MALIGNANT if i % 2 else NON_MALIGNANT, seed=i) for i in range(8)]
    val = [make_patch(MALIGNANT if i % 2 else NON_MALIGNANT, seed=50 + i) for i in range(6)]
    synthetic = [make_patch(MALIGNANT, seed=90 + i, synthetic=True) for i in range(4)] if with_synthetic else ()
    return ClassifierData(train=train, val=val, test=val, synthetic=synthetic)


def test_training_run_bookkeeping():
    run = train_classifier("none", _data(), TINY, seed=0)
    assert list(run.metrics.columns) == ["iteration", "lr", "loss", "val_auc"]
    assert list(run.metrics["iteration"]) == [1, 2, 3, 4, 5, 6]
    assert run.metrics["val_auc"].notna().tolist() == [False, False, True, False, False, True]
    assert run.best_iteration in (3, 6)
    assert 0.0 <= run.best_val_auc <= 1.0


def test_no_augmentation_equals_identity_traditional():
    a = train_classifier("none", _data(), TINY, seed=2)
    b = train_classifier("traditional", _data(), TINY, seed=2, policy=AugmentationPolicy.identity())
    pd.testing.assert_frame_equal(a.metrics, b.metrics)
    assert a.params.checksum() == b.params.checksum()


def test_cigan_scheme_uses_the_synthetic_pool():
    run = train_classifier("cigan+traditional", _data(with_synthetic=True), TINY, seed=1)
    assert len(run.metrics) == TINY.iterations


def test_training_is_deterministic():
    a = train_classifier("traditional", _data(), TINY, seed=4)
    b = train_classifier("traditional", _data(), TINY, seed=4)
    assert a.params.checksum() == b.params.checksum()


def test_scores_are_probabilities(tmp_path):
    data = _data()
    run = train_classifier("none", data, TINY, seed=0)
    scores = score_patches(run.model, data.test)
    assert scores.shape == (6,)
    assert np.all((scores > 0) & (scores < 1))
    frame = write_scores(tmp_path / "scores.csv", data.test, scores)
    assert list(frame.columns) == ["id", "label", "score"]
    assert list(frame["label"]) == [0, 1, 0, 1, 0, 1]


def test_training_errors():
    with pytest.raises(ConfigError, match="scheme"):
        train_classifier("mixup", _data(), TINY)
    with pytest.raises(ConfigError, match="data.synthetic"):
        train_classifier("cigan+traditional", _data(), TINY)
    with pytest.raises(DataError):
        train_classifier("none", ClassifierData(train=[]), TINY)
    with pytest.raises(ConfigError, match="classifier.init"):
        train_classifier("none", _data(), ClassifierConfig(init="pretrained-backbone"))


def test_single_class_validation_has_no_auc():
    data = _data()
    data.val = [p for p in data.val if p.label == MALIGNANT]
    run = train_classifier("none", data, TINY, seed=0)
    assert run.metrics["val_auc"].isna().all()
    assert math.isnan(run.best_val_auc)
    assert run.best_iteration == TINY.iterations
