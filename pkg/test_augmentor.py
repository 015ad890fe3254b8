#!/usr/bin/env python3
"""
Tests for augmentor: mask transplanting and dataset doubling
"""

import numpy as np
import pytest

from augmentor import (
    SynthesisConfig,
    donor_masks_from,
    synthesize_dataset,
    synthesize_examples,
    transplant_mask,
)
from errors import DataError, InvalidInputError
from gan_models import build_generator
from patch_pipeline import MALIGNANT, NON_MALIGNANT, GrayscaleImage, LesionMask, Patch, derive_seed
from conftest import make_patch


def _donor(size, top, left, height, width):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top:top + height, left:left + width] = 1
    return LesionMask(mask)


def test_donor_masks_come_from_malignant_patches(toy_patches):
    donors = donor_masks_from(toy_patches)
    assert len(donors) == 4
    assert all(d.area == 25 for d in donors)


def test_transplant_keeps_donor_position_when_it_fits():
    target = make_patch(NON_MALIGNANT, seed=1)
    donor = _donor(16, 3, 6, 4, 5)
    placed = transplant_mask(target, [donor], rng_seed=0)
    assert np.array_equal(placed.pixels, donor.pixels)


def test_transplant_clamps_into_a_smaller_frame():
    target = make_patch(NON_MALIGNANT, seed=1, size=16)
    donor = _donor(32, 20, 25, 4, 5)
    placed = transplant_mask(target, [donor], rng_seed=0)
    assert placed.pixels.shape == (16, 16)
    assert placed.area == 20
    rows, cols = np.nonzero(placed.pixels)
    assert rows.max() == 15 and cols.max() == 15


def test_transplant_reposition_is_seeded():
    target = make_patch(NON_MALIGNANT, seed=2)
    donors = [_donor(16, 0, 0, 3, 3)]
    a = transplant_mask(target, donors, rng_seed=5, reposition=True)
    b = transplant_mask(target, donors, rng_seed=5, reposition=True)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.area == 9


@pytest.mark.parametrize("donors", [[], [LesionMask.empty(16)], [_donor(32, 0, 0, 20, 20)]])
def test_transplant_rejects_unusable_donors(donors):
    with pytest.raises(InvalidInputError):
        transplant_mask(make_patch(NON_MALIGNANT), donors, rng_seed=0)


def test_synthesis_flips_labels_and_keeps_the_background(toy_gen_config, toy_patches):
    params = build_generator(toy_gen_config, init_seed=0)
    examples = synthesize_examples(toy_patches, params, seed=3, donor_masks=donor_masks_from(toy_patches),
                                   gen_config=toy_gen_config, config=SynthesisConfig(batch_size=3))
    assert len(examples) == len(toy_patches)
    for example in examples:
        source, synthetic = example.source, example.synthetic
        assert synthetic.synthetic
        assert synthetic.label != source.label
        outside = example.conditioned.channels[1] == 0
        assert np.array_equal(synthetic.image.pixels[outside], source.image.pixels[outside])
        if source.label == MALIGNANT:
            assert np.array_equal(example.conditioned.channels[1], source.mask.pixels)


def test_synthesis_is_deterministic_and_batch_independent(toy_gen_config, toy_patches):
    params = build_generator(toy_gen_config, init_seed=0)
    donors = donor_masks_from(toy_patches)
    a = synthesize_dataset(toy_patches, params, seed=9, donor_masks=donors, gen_config=toy_gen_config,
                           config=SynthesisConfig(batch_size=8))
    b = synthesize_dataset(toy_patches, params, seed=9, donor_masks=donors, gen_config=toy_gen_config,
                           config=SynthesisConfig(batch_size=1))
    for x, y in zip(a, b):
        assert np.allclose(x.image.pixels, y.image.pixels, atol=1e-6)
        assert x.label == y.label


def test_synthesis_of_nothing(toy_gen_config):
    assert synthesize_examples([], build_generator(toy_gen_config), seed=0) == []


def test_malignant_patch_without_mask_is_a_data_error(toy_gen_config):
    bare = Patch(GrayscaleImage(np.full((16, 16), 0.5)), LesionMask.empty(16), MALIGNANT, "bare")
    with pytest.raises(DataError, match="bare"):
        synthesize_examples([bare], build_generator(toy_gen_config), seed=0, gen_config=toy_gen_config)


def test_non_malignant_patches_need_donors(toy_gen_config):
    with pytest.raises(InvalidInputError):
        synthesize_examples([make_patch(NON_MALIGNANT)], build_generator(toy_gen_config), seed=0,
                            gen_config=toy_gen_config)


def test_transplant_picks_donors_uniformly():
    donors = [_donor(16, 1, 1 + 3 * k, 2, 2) for k in range(4)]
    target = make_patch(NON_MALIGNANT, seed=3)
    counts = [0] * 4
    for i in range(100):
        placed = transplant_mask(target, donors, rng_seed=derive_seed(9, i))
        counts[[np.array_equal(placed.pixels, d.pixels) for d in donors].index(True)] += 1
    band = 3 * np.sqrt(100 * 0.25 * 0.75)
    assert sum(counts) == 100
    assert all(abs(c - 25) <= band for c in counts)
