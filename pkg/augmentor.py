#!/usr/bin/env python3
"""
GAN-based dataset doubling

For each non-malignant patch a malignant lesion is infilled using a mask
borrowed from another malignant patch; for each malignant patch the lesion is
removed and non-malignant tissue is infilled in its place.
"""

from dataclasses import dataclass

import numpy as np
import torch

import runlog
from errors import ConfigError, DataError, InvalidInputError
from gan_models import composite, load_generator
from patch_pipeline import (
    MALIGNANT,
    NON_MALIGNANT,
    LesionMask,
    build_conditioned_input,
    derive_seed,
    opposite_class,
)

SYNTHESIS_BATCH = 16


@dataclass
class SynthesisConfig:
    reposition: bool = False
    batch_size: int = SYNTHESIS_BATCH

    def validate(self, prefix="synthesis"):
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", f"{prefix}.batch_size")
        return self


@dataclass(frozen=True)
class SynthesisExample:
    source: object
    conditioned: object
    synthetic: object


def donor_masks_from(patches):
    """Non-empty lesion masks of the malignant patches (callers pass the train split only)."""
    return [p.mask for p in patches if p.label == MALIGNANT and not p.mask.is_empty]


def transplant_mask(target, donor_masks, rng_seed, reposition=False):
    """Pick a donor mask uniformly and place it inside the target frame.

    The donor keeps its own frame coordinates when they fit and is shifted
    the minimal distance otherwise; `reposition` draws a uniform placement.
    """
    if not donor_masks:
        raise InvalidInputError("transplant needs at least one donor mask")
    rng = np.random.default_rng(rng_seed)
    donor = donor_masks[int(rng.integers(len(donor_masks)))]
    pixels = donor.pixels if isinstance(donor, LesionMask) else LesionMask(donor).pixels
    if not pixels.any():
        raise InvalidInputError("donor masks must be non-empty")

    height, width = target.image.pixels.shape
    rows, cols = np.nonzero(pixels)
    y0, y1 = rows.min(), rows.max() + 1
    x0, x1 = cols.min(), cols.max() + 1
    lesion = pixels[y0:y1, x0:x1]
    box_h, box_w = lesion.shape
    if box_h > height or box_w > width:
        raise InvalidInputError(f"donor lesion ({box_h}x{box_w}) does not fit a {height}x{width} frame")

    if reposition:
        top = int(rng.integers(0, height - box_h + 1))
        left = int(rng.integers(0, width - box_w + 1))
    else:
        top = min(max(int(y0), 0), height - box_h)
        left = min(max(int(x0), 0), width - box_w)
    placed = np.zeros((height, width), dtype=np.uint8)
    placed[top:top + box_h, left:left + box_w] = lesion
    return LesionMask(placed)


def _plan(patch, index, donor_masks, seed, config):
    patch_seed = derive_seed(seed, index)
    if patch.label == MALIGNANT:
        if patch.mask.is_empty:
            raise DataError(f"malignant patch '{patch.source_id}' has no lesion mask")
        mask = patch.mask
    else:
        mask = transplant_mask(patch, donor_masks, derive_seed(patch_seed, 1), config.reposition)
    return build_conditioned_input(patch, mask, opposite_class(patch.label), derive_seed(patch_seed, 2))


def synthesize_examples(patches, gen_params, seed, donor_masks=(), gen_config=None, config=None):
    """Source, generator input and synthetic patch for every input patch, in input order."""
    config = (config or SynthesisConfig()).validate()
    if not patches:
        return []
    if any(p.label == NON_MALIGNANT for p in patches) and not donor_masks:
        raise InvalidInputError("non-malignant patches need donor masks from malignant training patches")
    module = load_generator(gen_params, gen_config)
    plans = [_plan(p, i, donor_masks, seed, config) for i, p in enumerate(patches)]

    examples = []
    starts = range(0, len(patches), config.batch_size)
    for start in runlog.progress(starts, desc="synthesize", unit="batch"):
        chunk = plans[start:start + config.batch_size]
        stack = torch.from_numpy(np.stack([c.channels for c in chunk]))
        with torch.no_grad():
            raw = module(stack)[:, 0].numpy()
        for offset, conditioned in enumerate(chunk):
            source = patches[start + offset]
            mask = LesionMask(conditioned.channels[1].astype(np.uint8))
            synthetic = composite(raw[offset], source, mask, conditioned.target_class)
            examples.append(SynthesisExample(source, conditioned, synthetic))
    return examples


def synthesize_dataset(patches, gen_params, seed, donor_masks=(), gen_config=None, config=None):
    examples = synthesize_examples(patches, gen_params, seed, donor_masks, gen_config, config)
    flips = sum(1 for e in examples if e.synthetic.label == MALIGNANT)
    runlog.ok(f"synthesized {flips} malignant and {len(examples) - flips} non-malignant patches")
    return [e.synthetic for e in examples]
