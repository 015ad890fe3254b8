#!/usr/bin/env python3
"""
Downstream patch classifier under three augmentation schemes

Schemes:
- none: raw batches from the real training patches
- traditional: rotation -> horizontal flip -> rescale on every example
- cigan+traditional: curriculum batches mixing real and synthetic patches,
  then the traditional policy on every example
"""

import copy
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

import runlog
from errors import ConfigError, DataError, DivergenceError, InvalidInputError
from evaluation import SCHEMES, roc_auc
from gan_models import config_fingerprint, configure_determinism, init_weights, network_params
from patch_pipeline import GrayscaleImage, LesionMask, Patch, class_index, derive_seed

LEARNING_RATE = 1e-5
BATCH_SIZE = 32
ITERATIONS = 10_000
LR_DECAY = 0.9
DECAY_EVERY = 2_000
VALIDATE_EVERY = 500
SMALL_CNN_WIDTHS = (16, 32, 64, 128)

BASE_REAL_FRACTION = 0.5
CURRICULUM_STEP = 1_000
CURRICULUM_GROWTH = 1.2
CURRICULUM_CAP = 0.9

MAX_ROTATION = 30.0
FLIP_PROBABILITY = 0.5
SCALE_RANGE = (0.75, 1.25)

ARCHITECTURES = ("small-cnn", "resnet50")
INITS = ("seeded-random", "pretrained-backbone")


@dataclass
class ClassifierConfig:
    architecture: str = "small-cnn"
    init: str = "seeded-random"
    learning_rate: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = BATCH_SIZE
    iterations: int = ITERATIONS
    lr_decay: float = LR_DECAY
    decay_every: int = DECAY_EVERY
    validate_every: int = VALIDATE_EVERY
    widths: tuple = SMALL_CNN_WIDTHS

    def validate(self, prefix="classifier"):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"must be one of {ARCHITECTURES}", f"{prefix}.architecture")
        if self.init not in INITS:
            raise ConfigError(f"must be one of {INITS}", f"{prefix}.init")
        if self.init == "pretrained-backbone" and self.architecture != "resnet50":
            raise ConfigError("a pretrained backbone is only available for resnet50", f"{prefix}.init")
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", f"{prefix}.learning_rate")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("must be in (0, 1]", f"{prefix}.lr_decay")
        for name in ("batch_size", "iterations", "decay_every", "validate_every"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"{prefix}.{name}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be >= 1", f"{prefix}.widths")
        return self


@dataclass
class CurriculumSchedule:
    base_real_fraction: float = BASE_REAL_FRACTION
    step_every: int = CURRICULUM_STEP
    growth: float = CURRICULUM_GROWTH
    cap: float = CURRICULUM_CAP
    mode: str = "multiplicative"
    additive_step: float = 0.2

    def validate(self, prefix="curriculum"):
        if not 0 <= self.base_real_fraction <= self.cap <= 1:
            raise ConfigError("need 0 <= base_real_fraction <= cap <= 1", f"{prefix}.base_real_fraction")
        if self.step_every < 1:
            raise ConfigError("must be >= 1", f"{prefix}.step_every")
        if self.mode not in ("multiplicative", "additive"):
            raise ConfigError("must be 'multiplicative' or 'additive'", f"{prefix}.mode")
        if self.growth < 1 or self.additive_step < 0:
            raise ConfigError("schedule must not decrease", f"{prefix}.growth")
        return self


@dataclass
class AugmentationPolicy:
    max_rotation: float = MAX_ROTATION
    flip_probability: float = FLIP_PROBABILITY
    min_scale: float = SCALE_RANGE[0]
    max_scale: float = SCALE_RANGE[1]

    @classmethod
    def identity(cls):
        return cls(max_rotation=0.0, flip_probability=0.0, min_scale=1.0, max_scale=1.0)

    def validate(self, prefix="augmentation"):
        if self.max_rotation < 0:
            raise ConfigError("must be >= 0", f"{prefix}.max_rotation")
        if not 0 <= self.flip_probability <= 1:
            raise ConfigError("must be in [0, 1]", f"{prefix}.flip_probability")
        if not 0 < self.min_scale <= self.max_scale:
            raise ConfigError("need 0 < min_scale <= max_scale", f"{prefix}.min_scale")
        return self


# ---------------------------------------------------------------- schedules

def real_fraction(iteration, schedule=None):
    schedule = schedule or CurriculumSchedule()
    if iteration < 0:
        raise InvalidInputError(f"iteration must be >= 0, got {iteration}")
    steps = iteration // schedule.step_every
    if schedule.mode == "additive":
        value = schedule.base_real_fraction + schedule.additive_step * steps
    else:
        value = schedule.base_real_fraction * schedule.growth ** steps
    return min(schedule.cap, value)


def real_count(batch_size, fraction):
    """Rounded half up, so 32 * 0.9 = 28.8 gives 29."""
    return int(math.floor(batch_size * fraction + 0.5))


def curriculum_batch(real_pool, synthetic_pool, iteration, batch_size, schedule, seed):
    """Real examples first, then synthetic; both drawn uniformly with replacement.

    `schedule=None` means no synthetic data (all-real batches).
    """
    fraction = 1.0 if schedule is None else real_fraction(iteration, schedule)
    n_real = real_count(batch_size, fraction)
    n_synthetic = batch_size - n_real
    if n_real and not real_pool:
        raise ConfigError("the real pool is empty", "data.patches")
    if n_synthetic and not synthetic_pool:
        raise ConfigError("the synthetic pool is empty", "data.synthetic")
    rng = np.random.default_rng(derive_seed(seed, iteration))
    real = [real_pool[i] for i in rng.integers(len(real_pool), size=n_real)] if n_real else []
    synthetic = [synthetic_pool[i] for i in rng.integers(len(synthetic_pool), size=n_synthetic)] if n_synthetic else []
    return real + synthetic


def learning_rate_at(iteration, config):
    return config.learning_rate * config.lr_decay ** (iteration // config.decay_every)


# ---------------------------------------------------------------- traditional augmentation

def _affine(pixels, forward, order):
    # forward maps input (row, col) offsets from the centre to output offsets
    centre = (np.asarray(pixels.shape, dtype=np.float64) - 1.0) / 2.0
    inverse = np.linalg.inv(forward)
    offset = centre - inverse @ centre
    return ndimage.affine_transform(pixels, inverse, offset=offset, order=order, mode="constant", cval=0.0)


def rotation_matrix(angle_deg):
    t = math.radians(angle_deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def augment_pixels(pixels, angle, flip, scale, order=1):
    """Rotate about the centre, mirror left-right, then rescale about the centre; zero fill."""
    out = np.asarray(pixels, dtype=np.float64)
    if angle:
        out = _affine(out, rotation_matrix(angle), order)
    if flip:
        out = out[:, ::-1]
    if scale != 1.0:
        out = _affine(out, scale * np.eye(2), order)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_traditional_augmentation(patch, policy, seed):
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-policy.max_rotation, policy.max_rotation)
    flip = bool(rng.random() < policy.flip_probability)
    scale = rng.uniform(policy.min_scale, policy.max_scale)
    image = augment_pixels(patch.image.pixels, angle, flip, scale)
    mask = augment_pixels(patch.mask.pixels, angle, flip, scale, order=0)
    return Patch(GrayscaleImage(image), LesionMask((mask > 0.5).astype(np.uint8)),
                 patch.label, patch.source_id, patch.synthetic)


# ---------------------------------------------------------------- models

class SmallPatchCNN(nn.Module):
    """Four conv/ReLU/max-pool blocks, global average pooling, one logit."""

    def __init__(self, widths=SMALL_CNN_WIDTHS):
        super().__init__()
        layers, in_ch = [], 1
        for width in widths:
            layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, 1)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3))).squeeze(1)


class GrayscaleResNet(nn.Module):
    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        self.backbone = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        self.backbone.fc = nn.Linear(self.backbone.fc.in_features, 1)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1))

    def forward(self, x):
        x = (x.expand(-1, 3, -1, -1) - self.mean) / self.std
        return self.backbone(x).squeeze(1)


def build_classifier(config, seed):
    if config.architecture == "small-cnn":
        return init_weights(SmallPatchCNN(config.widths), seed)
    torch.manual_seed(seed)
    return GrayscaleResNet(pretrained=config.init == "pretrained-backbone")


def _images(patches):
    return torch.from_numpy(np.stack([p.image.pixels for p in patches]))[:, None]


def _labels(patches):
    return np.array([class_index(p.label) for p in patches], dtype=np.int64)


def score_patches(model, patches, batch_size=64):
    """Malignancy probability per patch."""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            scores.append(torch.sigmoid(model(_images(patches[start:start + batch_size]))).numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def write_scores(path, patches, scores):
    frame = pd.DataFrame({"id": [p.source_id for p in patches], "label": _labels(patches), "score": scores})
    frame.to_csv(path, index=False)
    return frame


# ---------------------------------------------------------------- training

@dataclass
class ClassifierData:
    train: list
    val: list = ()
    test: list = ()
    synthetic: list = ()


@dataclass
class ClassifierRun:
    model: nn.Module
    params: object
    metrics: pd.DataFrame
    best_iteration: int
    best_val_auc: float


def _validation_auc(model, patches):
    labels = _labels(patches)
    if len(set(labels.tolist())) < 2:
        return math.nan
    return roc_auc(score_patches(model, patches), labels)


def train_classifier(scheme, datasets, config=None, seed=0, schedule=None, policy=None):
    """Train for exactly `config.iterations` steps; the returned model holds the best-validation weights."""
    config = (config or ClassifierConfig()).validate()
    schedule = (schedule or CurriculumSchedule()).validate()
    policy = (policy or AugmentationPolicy()).validate()
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme '{scheme}' (expected one of {SCHEMES})", "scheme")
    if not datasets.train:
        raise DataError("no training patches")
    if scheme == "cigan+traditional" and not datasets.synthetic:
        raise ConfigError("the cigan scheme needs a synthetic pool", "data.synthetic")
    if datasets.val and len(set(_labels(datasets.val).tolist())) < 2:
        runlog.warn("validation split holds a single class; validation AUC is undefined")

    configure_determinism()
    model = build_classifier(config, derive_seed(seed, 0))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2), eps=config.adam_eps)
    train = list(datasets.train)
    synthetic = list(datasets.synthetic)

    rows = []
    best_auc, best_iteration, best_state = -math.inf, 0, None
    for it in runlog.progress(range(config.iterations), desc=f"classifier [{scheme}]", unit="it"):
        lr = learning_rate_at(it, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch_seed = derive_seed(seed, 1)
        if scheme == "cigan+traditional":
            batch = curriculum_batch(train, synthetic, it, config.batch_size, schedule, batch_seed)
        else:
            batch = curriculum_batch(train, (), it, config.batch_size, None, batch_seed)
        if scheme != "none":
            batch = [apply_traditional_augmentation(p, policy, derive_seed(seed, 2, it, j))
                     for j, p in enumerate(batch)]

        model.train()
        optimizer.zero_grad(set_to_none=True)
        targets = torch.from_numpy(_labels(batch).astype(np.float32))
        loss = F.binary_cross_entropy_with_logits(model(_images(batch)), targets)
        if not torch.isfinite(loss):
            raise DivergenceError("non-finite classifier loss", it + 1)
        loss.backward()
        optimizer.step()

        val_auc = math.nan
        done = it + 1
        if datasets.val and (done % config.validate_every == 0 or done == config.iterations):
            val_auc = _validation_auc(model, datasets.val)
            runlog.log(f"iteration {done}: loss={loss.item():.4f} val AUC={val_auc:.4f}", "📊")
            if val_auc > best_auc:
                best_auc, best_iteration, best_state = val_auc, done, copy.deepcopy(model.state_dict())
        rows.append({"iteration": done, "lr": lr, "loss": loss.item(), "val_auc": val_auc})

    if best_state is None:
        best_iteration = config.iterations
    else:
        model.load_state_dict(best_state)
    fingerprint = config_fingerprint("classifier", config)
    params = network_params(model, fingerprint, best_iteration)
    return ClassifierRun(model, params, pd.DataFrame(rows, columns=["iteration", "lr", "loss", "val_auc"]),
                         best_iteration, best_auc if best_state is not None else math.nan)
