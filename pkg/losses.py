#!/usr/bin/env python3
"""
ciGAN loss terms

Features:
- Feature (perceptual) loss over three pooling taps of a frozen extractor
- Adversarial losses: literal discriminator loss, non-saturating generator loss
- Boundary loss weighted by the Gaussian-blurred mask boundary
- Weighted composition (1.0 / 10.0 / 10000.0 by default)
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from errors import ConfigError, DivergenceError, InvalidInputError
from gan_models import init_weights
from patch_pipeline import LesionMask

ADVERSARIAL_WEIGHT = 1.0
FEATURE_WEIGHT = 10.0
BOUNDARY_WEIGHT = 10000.0
BOUNDARY_SIGMA = 10.0
GAUSSIAN_TRUNCATE = 3.0
PROBABILITY_EPS = 1e-7

SEEDED_WIDTHS = (16, 32, 64)
VGG19_POOL_SLICES = ((0, 5), (5, 10), (10, 19))  # pool1, pool2, pool3 of vgg19.features
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LossWeights:
    adversarial: float = ADVERSARIAL_WEIGHT
    feature: float = FEATURE_WEIGHT
    boundary: float = BOUNDARY_WEIGHT

    def validate(self, prefix="losses"):
        for name in ("adversarial", "feature", "boundary"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"must be finite and >= 0, got {value}", f"{prefix}.{name}")
        return self


@dataclass
class LossConfig:
    adversarial: float = ADVERSARIAL_WEIGHT
    feature: float = FEATURE_WEIGHT
    boundary: float = BOUNDARY_WEIGHT
    boundary_sigma: float = BOUNDARY_SIGMA
    extractor: str = "seeded"
    extractor_seed: int = 0

    @property
    def weights(self):
        return LossWeights(self.adversarial, self.feature, self.boundary)

    @property
    def extractor_spec(self):
        return {"kind": self.extractor, "seed": self.extractor_seed}

    def validate(self, prefix="losses"):
        self.weights.validate(prefix)
        if not self.boundary_sigma > 0:
            raise ConfigError("must be > 0", f"{prefix}.boundary_sigma")
        if self.extractor not in ("seeded", "vgg19"):
            raise ConfigError("must be 'seeded' or 'vgg19'", f"{prefix}.extractor")
        return self


class PerceptualExtractor(nn.Module):
    """Frozen feature network; `taps` returns the outputs of its three pooling stages."""

    def __init__(self, stages, provenance, mean=None, std=None):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.provenance = provenance
        if mean is not None:
            self.register_buffer("mean", torch.tensor(mean).reshape(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(std).reshape(1, 3, 1, 1))
        else:
            self.mean = self.std = None
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    @classmethod
    def seeded(cls, seed=0, widths=SEEDED_WIDTHS):
        stages, in_ch = [], 3
        for width in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, width, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ))
            in_ch = width
        init_weights(nn.ModuleList(stages), seed)
        return cls(stages, "seeded-random-frozen")

    @classmethod
    def vgg19(cls):
        from torchvision.models import VGG19_Weights, vgg19

        features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        stages = [features[start:stop] for start, stop in VGG19_POOL_SLICES]
        return cls(stages, "pretrained-classification-backbone", IMAGENET_MEAN, IMAGENET_STD)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def taps(self, images):
        x = images.to(self.dtype)
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        if self.mean is not None:
            x = (x - self.mean) / self.std
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return outputs

    def train(self, mode=True):
        # always inference mode
        return super().train(False)


def make_extractor(kind="seeded", seed=0):
    if kind == "seeded":
        return PerceptualExtractor.seeded(seed)
    if kind == "vgg19":
        return PerceptualExtractor.vgg19()
    raise ConfigError(f"unknown extractor '{kind}' (expected 'seeded' or 'vgg19')", "losses.extractor")


def _as_batch(images):
    """(H,W) / (B,H,W) / (B,1,H,W) arrays or tensors -> (B,1,H,W) tensor."""
    if not isinstance(images, torch.Tensor):
        images = torch.from_numpy(np.asarray(images))
    if images.ndim == 2:
        return images[None, None]
    if images.ndim == 3:
        return images[:, None]
    if images.ndim == 4:
        return images
    raise InvalidInputError(f"expected a 2-, 3- or 4-D image batch, got shape {tuple(images.shape)}")


def feature_loss(extractor, real, generated):
    """Sum over the three taps of the mean absolute feature difference."""
    real, generated = _as_batch(real), _as_batch(generated)
    if real.shape != generated.shape:
        raise InvalidInputError(f"shape mismatch: real {tuple(real.shape)}, generated {tuple(generated.shape)}")
    total = 0.0
    for real_map, gen_map in zip(extractor.taps(real), extractor.taps(generated)):
        total = total + (real_map - gen_map).abs().mean()
    if not torch.isfinite(total):
        raise DivergenceError("non-finite feature activations")
    return total


def adversarial_losses(d_real, d_fake, eps=PROBABILITY_EPS):
    """(d_loss, g_loss) with d_loss = -mean log D(real) - mean log(1 - D(fake)), g_loss = -mean log D(fake)."""
    d_real = d_real if isinstance(d_real, torch.Tensor) else torch.as_tensor(d_real, dtype=torch.float64)
    d_fake = d_fake if isinstance(d_fake, torch.Tensor) else torch.as_tensor(d_fake, dtype=torch.float64)
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise InvalidInputError("adversarial losses need non-empty probability batches")
    real = d_real.clamp(eps, 1.0 - eps)
    fake = d_fake.clamp(eps, 1.0 - eps)
    d_loss = -torch.log(real).mean() - torch.log1p(-fake).mean()
    g_loss = -torch.log(fake).mean()
    return d_loss, g_loss


def boundary_weight(mask, sigma=BOUNDARY_SIGMA, truncate=GAUSSIAN_TRUNCATE):
    """Gaussian-blurred 3x3 morphological gradient of the mask.

    Outside the frame counts as background, so a full mask has its boundary
    along the frame edge; the blur uses reflective padding and a 3-sigma radius.
    """
    pixels = mask.pixels if isinstance(mask, LesionMask) else LesionMask(mask).pixels
    binary = pixels.astype(bool)
    structure = np.ones((3, 3), dtype=bool)
    dilated = ndimage.binary_dilation(binary, structure=structure, border_value=0)
    eroded = ndimage.binary_erosion(binary, structure=structure, border_value=0)
    boundary = (dilated & ~eroded).astype(np.float64)
    return ndimage.gaussian_filter(boundary, sigma=sigma, mode="reflect", truncate=truncate)


def boundary_loss(real, generated, w):
    """sum |w * (real - generated)| per image, averaged over the batch."""
    real, generated = _as_batch(real), _as_batch(generated)
    if real.shape != generated.shape:
        raise InvalidInputError(f"shape mismatch: real {tuple(real.shape)}, generated {tuple(generated.shape)}")
    w = _as_batch(w).to(generated.dtype)
    if w.shape[-2:] != real.shape[-2:] or w.shape[0] not in (1, real.shape[0]):
        raise InvalidInputError(f"weight map shape {tuple(w.shape)} does not match images {tuple(real.shape)}")
    per_image = (w * (real - generated)).abs().sum(dim=(1, 2, 3))
    return per_image.mean()


def total_generator_loss(adv, feat, bound, weights=None):
    weights = weights or LossWeights()
    for name, term in (("adversarial", adv), ("feature", feat), ("boundary", bound)):
        if not math.isfinite(float(term)):
            raise DivergenceError(f"non-finite {name} loss")
    return weights.adversarial * adv + weights.feature * feat + weights.boundary * bound
