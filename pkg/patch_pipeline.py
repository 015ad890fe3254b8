#!/usr/bin/env python3
"""
Patch pipeline: full images + lesion annotations -> fixed-size training patches

Features:
- Fit-inside resize to the 1375x750 target box (bilinear)
- Rejection sampling of patches that are more than 75% tissue
- Corrupted images and the 4-channel conditioned generator input
- Per-class stratified 80/10/10 manifests (JSONL) and PNG patch archives
- Procedural phantom mammograms standing in for real screening data
"""

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

import runlog
from errors import ConfigError, DataError, InvalidInputError, SamplingStarvationError

PATCH_SIZE = 256
TARGET_SIZE = (1375, 750)  # (height, width)
TISSUE_THRESHOLD = 0.05
MIN_TISSUE_FRACTION = 0.75
MAX_SAMPLING_ATTEMPTS = 100_000
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
SPLITS = ("train", "val", "test")

NON_MALIGNANT = "non-malignant"
MALIGNANT = "malignant"
CLASSES = (NON_MALIGNANT, MALIGNANT)

MANIFEST_NAME = "manifest.jsonl"


def class_index(label):
    if label not in CLASSES:
        raise InvalidInputError(f"unknown class label '{label}'")
    return CLASSES.index(label)


def opposite_class(label):
    return CLASSES[1 - class_index(label)]


def derive_seed(seed, *keys):
    """Stable 32-bit seed for a sub-task identified by integer keys."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def _round_half_up(value):
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class GrayscaleImage:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidInputError(f"image must be a non-empty 2-D array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise InvalidInputError("image contains non-finite values")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class LesionMask:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise InvalidInputError(f"mask must be 2-D, got shape {pixels.shape}")
        if not np.all((pixels == 0) | (pixels == 1)):
            raise InvalidInputError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "pixels", pixels.astype(np.uint8))

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def area(self):
        return int(np.count_nonzero(self.pixels))

    @property
    def is_empty(self):
        return self.area == 0

    @classmethod
    def empty(cls, size):
        return cls(np.zeros((size, size), dtype=np.uint8))


@dataclass(frozen=True)
class Patch:
    image: GrayscaleImage
    mask: LesionMask
    label: str
    source_id: str
    synthetic: bool = False

    def __post_init__(self):
        class_index(self.label)
        if self.image.pixels.shape != self.mask.shape:
            raise InvalidInputError(
                f"patch '{self.source_id}': mask shape {self.mask.shape} != image shape {self.image.pixels.shape}"
            )

    @property
    def size(self):
        return self.image.height


@dataclass(frozen=True)
class ConditionedInput:
    """Generator input stack: corrupted image, mask, non-malignant plane, malignant plane."""

    channels: np.ndarray
    target_class: str


@dataclass(frozen=True)
class Lesion:
    """Full-frame lesion annotation."""

    mask: np.ndarray
    malignant: bool = True


@dataclass
class ManifestRecord:
    source_id: str
    path: str
    label: str
    split: str = None
    mask_path: str = None
    extra: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    records: list
    seed: int
    split_fractions: tuple = SPLIT_FRACTIONS

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def counts(self):
        return {s: len(self.split(s)) for s in SPLITS}


@dataclass
class PipelineConfig:
    patch_size: int = PATCH_SIZE
    target_height: int = TARGET_SIZE[0]
    target_width: int = TARGET_SIZE[1]
    tissue_threshold: float = TISSUE_THRESHOLD
    min_tissue_fraction: float = MIN_TISSUE_FRACTION
    max_attempts: int = MAX_SAMPLING_ATTEMPTS
    min_overlap: float = 0.0
    lesion_centered: bool = True

    @property
    def target(self):
        return (self.target_height, self.target_width)

    def validate(self, prefix="pipeline"):
        if self.patch_size < 1:
            raise ConfigError("must be >= 1", f"{prefix}.patch_size")
        if self.target_height < 1 or self.target_width < 1:
            raise ConfigError("target box must be at least 1x1", f"{prefix}.target_height")
        if not 0.0 <= self.tissue_threshold < 1.0:
            raise ConfigError("must lie in [0, 1)", f"{prefix}.tissue_threshold")
        if not 0.0 <= self.min_tissue_fraction < 1.0:
            raise ConfigError("must lie in [0, 1)", f"{prefix}.min_tissue_fraction")
        if self.max_attempts < 1:
            raise ConfigError("must be >= 1", f"{prefix}.max_attempts")
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ConfigError("must lie in [0, 1]", f"{prefix}.min_overlap")
        return self


# ---------------------------------------------------------------- image I/O

def load_grayscale(path):
    """Read an 8- or 16-bit grayscale PNG, normalized by the bit-depth maximum."""
    with Image.open(path) as img:
        if img.mode.startswith("I;16") or img.mode == "I":
            raw = np.asarray(img, dtype=np.float64)
            peak = 65535.0
        else:
            raw = np.asarray(img.convert("L"), dtype=np.float64)
            peak = 255.0
    return GrayscaleImage(np.clip(raw / peak, 0.0, 1.0))


def save_grayscale(pixels, path, bits=16):
    pixels = np.asarray(pixels, dtype=np.float64)
    if bits == 16:
        Image.fromarray(np.round(pixels * 65535.0).astype(np.uint16)).save(path)
    elif bits == 8:
        Image.fromarray(np.round(pixels * 255.0).astype(np.uint8), mode="L").save(path)
    else:
        raise InvalidInputError(f"unsupported bit depth {bits}")


def load_mask(path):
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def save_mask(mask, path):
    pixels = mask.pixels if isinstance(mask, LesionMask) else np.asarray(mask)
    Image.fromarray((pixels > 0).astype(np.uint8) * 255, mode="L").save(path)


# ---------------------------------------------------------------- geometry

def resize_to_target(image, target=TARGET_SIZE):
    """Scale `image` by min(th/h, tw/w) on both axes so it fits inside the target box."""
    if not isinstance(image, GrayscaleImage):
        image = GrayscaleImage(image)
    th, tw = target
    if th < 1 or tw < 1:
        raise InvalidInputError(f"target box must be at least 1x1, got {target}")
    scale = min(th / image.height, tw / image.width)
    new_h = min(th, max(1, _round_half_up(image.height * scale)))
    new_w = min(tw, max(1, _round_half_up(image.width * scale)))
    if (new_h, new_w) == (image.height, image.width):
        return image
    resized = Image.fromarray(image.pixels).resize((new_w, new_h), resample=Image.BILINEAR)
    return GrayscaleImage(np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0))


def resize_mask(mask, shape):
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape == tuple(shape):
        return mask
    img = Image.fromarray(mask * 255, mode="L").resize((shape[1], shape[0]), resample=Image.NEAREST)
    return (np.asarray(img) > 127).astype(np.uint8)


def tissue_fraction(patch_pixels, threshold=TISSUE_THRESHOLD):
    pixels = np.asarray(patch_pixels)
    if pixels.size == 0:
        raise InvalidInputError("empty patch")
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise InvalidInputError("patch intensities must be finite and lie in [0, 1]")
    return float(np.count_nonzero(pixels > threshold)) / pixels.size


# ---------------------------------------------------------------- sampling

def _label_crop(lesions, y, x, size, min_overlap):
    malignant, benign = [], []
    for lesion in lesions:
        crop = lesion.mask[y:y + size, x:x + size]
        overlap = np.count_nonzero(crop)
        if overlap == 0:
            continue
        if lesion.malignant and overlap / np.count_nonzero(lesion.mask) >= min_overlap:
            malignant.append(crop)
        else:
            benign.append(crop)
    chosen = malignant or benign
    mask = np.zeros((size, size), dtype=np.uint8)
    for crop in chosen:
        mask |= (crop > 0).astype(np.uint8)
    return (MALIGNANT if malignant else NON_MALIGNANT), mask


def _sample(image, annotations, count, rng_seed, config, source_id):
    size = config.patch_size
    if count < 0:
        raise InvalidInputError(f"patch count must be >= 0, got {count}")
    if image.height < size or image.width < size:
        raise InvalidInputError(
            f"image '{source_id}' ({image.height}x{image.width}) is smaller than the {size}x{size} patch"
        )
    lesions = []
    for lesion in annotations:
        mask = np.asarray(lesion.mask if isinstance(lesion, Lesion) else lesion, dtype=np.uint8)
        if mask.shape != image.pixels.shape:
            raise InvalidInputError(f"annotation shape {mask.shape} != image shape {image.pixels.shape}")
        if np.count_nonzero(mask):
            lesions.append(Lesion(mask, getattr(lesion, "malignant", True)))

    rng = np.random.default_rng(rng_seed)
    centers = None
    if config.lesion_centered:
        malignant_union = np.zeros_like(image.pixels, dtype=bool)
        for lesion in lesions:
            if lesion.malignant:
                malignant_union |= lesion.mask > 0
        if malignant_union.any():
            centers = np.argwhere(malignant_union)

    patches, attempts = [], 0
    while len(patches) < count and attempts < config.max_attempts:
        attempts += 1
        if centers is not None:
            cy, cx = centers[rng.integers(len(centers))]
            y = int(rng.integers(max(0, cy - size + 1), min(cy, image.height - size) + 1))
            x = int(rng.integers(max(0, cx - size + 1), min(cx, image.width - size) + 1))
        else:
            y = int(rng.integers(0, image.height - size + 1))
            x = int(rng.integers(0, image.width - size + 1))
        crop = image.pixels[y:y + size, x:x + size]
        if np.count_nonzero(crop > config.tissue_threshold) / crop.size <= config.min_tissue_fraction:
            continue
        label, mask = _label_crop(lesions, y, x, size, config.min_overlap)
        patches.append(Patch(GrayscaleImage(crop.copy()), LesionMask(mask), label, f"{source_id}_p{len(patches):04d}"))

    if count > 0 and not patches:
        raise SamplingStarvationError(source_id, attempts)
    if len(patches) < count:
        runlog.warn(f"{source_id}: only {len(patches)}/{count} patches accepted after {attempts} attempts")
    return patches, attempts


def sample_patches(image, annotations, count, rng_seed, config=None, source_id="image"):
    """Rejection-sample `count` patches whose tissue fraction exceeds the minimum.

    A patch is malignant iff it overlaps a malignant annotation (by at least
    `config.min_overlap` of that lesion's area); its mask is the cropped lesion
    segmentation.
    """
    config = config or PipelineConfig()
    if not isinstance(image, GrayscaleImage):
        image = GrayscaleImage(image)
    patches, _ = _sample(image, annotations, count, rng_seed, config, source_id)
    return patches


# ---------------------------------------------------------------- generator input

def _check_frame(patch, mask):
    if patch.image.pixels.shape != mask.shape:
        raise InvalidInputError(f"mask shape {mask.shape} != patch shape {patch.image.pixels.shape}")


def make_corrupted(patch, mask, rng_seed):
    """Patch pixels with the masked region replaced by uniform [0, 1) noise."""
    _check_frame(patch, mask)
    rng = np.random.default_rng(rng_seed)
    corrupted = patch.image.pixels.copy()
    inside = mask.pixels.astype(bool)
    corrupted[inside] = rng.random(int(np.count_nonzero(inside)), dtype=np.float32)
    return corrupted


def build_conditioned_input(patch, mask, target_class, rng_seed):
    _check_frame(patch, mask)
    channels = np.zeros((4,) + mask.shape, dtype=np.float32)
    channels[0] = make_corrupted(patch, mask, rng_seed)
    channels[1] = mask.pixels
    channels[2 + class_index(target_class)] = 1.0
    return ConditionedInput(channels, target_class)


# ---------------------------------------------------------------- manifests

def build_manifest(records, seed, split_fractions=SPLIT_FRACTIONS):
    """Assign train/val/test per class, each class within one record of the fractions.

    Leftover records after flooring go to the split furthest below its global
    target, so small datasets still populate every split.
    """
    if not records:
        raise InvalidInputError("cannot build a manifest from an empty record list")
    fractions = tuple(float(f) for f in split_fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    ids = [r.source_id for r in records]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate source ids in manifest records")

    total = len(records)
    assigned_totals = [0, 0, 0]
    groups = {}
    for label in sorted({r.label for r in records}):
        class_index(label)
        group = sorted((r for r in records if r.label == label), key=lambda r: r.source_id)
        ideal = [len(group) * f for f in fractions]
        counts = [int(math.floor(v + 1e-9)) for v in ideal]
        groups[label] = (group, ideal, counts)
        assigned_totals = [a + c for a, c in zip(assigned_totals, counts)]

    for label, (group, ideal, counts) in groups.items():
        leftover = len(group) - sum(counts)
        open_splits = [0, 1, 2]
        for _ in range(leftover):
            best = max(
                open_splits,
                key=lambda s: (total * fractions[s] - assigned_totals[s], ideal[s] - counts[s], -s),
            )
            counts[best] += 1
            assigned_totals[best] += 1
            open_splits.remove(best)

    rng = np.random.default_rng(seed)
    split_of = {}
    for label, (group, _, counts) in groups.items():
        order = rng.permutation(len(group))
        for rank, idx in enumerate(order):
            if rank < counts[0]:
                split_of[group[idx].source_id] = SPLITS[0]
            elif rank < counts[0] + counts[1]:
                split_of[group[idx].source_id] = SPLITS[1]
            else:
                split_of[group[idx].source_id] = SPLITS[2]

    return DatasetManifest(
        records=[replace(r, split=split_of[r.source_id]) for r in records],
        seed=int(seed),
        split_fractions=fractions,
    )


def write_manifest(manifest, path):
    lines = [json.dumps({"seed": manifest.seed, "split_fractions": list(manifest.split_fractions)})]
    for r in manifest.records:
        row = {"id": r.source_id, "path": r.path, "mask_path": r.mask_path, "label": r.label, "split": r.split}
        row.update(r.extra)
        lines.append(json.dumps(row, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        seed = int(header["seed"])
        fractions = tuple(header["split_fractions"])
    except (ValueError, KeyError, TypeError):
        raise DataError(f"manifest {path}: line 1 is not a valid header")
    records = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
            records.append(ManifestRecord(
                source_id=row.pop("id"),
                path=row.pop("path"),
                label=row.pop("label"),
                split=row.pop("split", None),
                mask_path=row.pop("mask_path", None),
                extra=row,
            ))
        except (ValueError, KeyError, AttributeError):
            raise DataError(f"manifest {path}: line {number} is not a valid record")
    return DatasetManifest(records, seed, fractions)


# ---------------------------------------------------------------- phantoms

def _tissue_background(rng, height, width):
    noise = rng.standard_normal((height, width))
    smooth = ndimage.gaussian_filter(noise, sigma=max(height, width) / 8.0, mode="reflect")
    low, high = smooth.min(), smooth.max()
    if high - low < 1e-12:
        return np.full((height, width), 0.5)
    return 0.2 + 0.6 * (smooth - low) / (high - low)


def _lesion_blob(rng, height, width):
    short = min(height, width)
    a = rng.uniform(0.04, 0.1) * short + 1.0
    b = rng.uniform(0.04, 0.1) * short + 1.0
    cy = rng.uniform(a, max(a, height - a))
    cx = rng.uniform(b, max(b, width - b))
    theta = rng.uniform(0.0, np.pi)
    amplitude = rng.uniform(0.15, 0.3)
    yy, xx = np.mgrid[0:height, 0:width]
    u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    profile = amplitude * 0.5 * (1.0 - np.tanh((r - 0.9) / 0.1))
    return profile, (r <= 1.0).astype(np.uint8)


def make_phantom_dataset(n_images, image_size=(256, 256), lesion_rate=0.5, rng_seed=0):
    """Smooth tissue backgrounds in [0.2, 0.8]; a `lesion_rate` share get 1-3 bright elliptical blobs.

    Returns (images, annotations, manifest); lesion images are labeled malignant.
    """
    if n_images < 1:
        raise InvalidInputError(f"n_images must be >= 1, got {n_images}")
    if not 0.0 <= lesion_rate <= 1.0:
        raise InvalidInputError(f"lesion_rate must lie in [0, 1], got {lesion_rate}")
    height, width = image_size
    if height < 1 or width < 1:
        raise InvalidInputError(f"image size must be at least 1x1, got {image_size}")

    rng = np.random.default_rng(rng_seed)
    n_lesion = _round_half_up(n_images * lesion_rate)
    with_lesions = set(int(i) for i in rng.permutation(n_images)[:n_lesion])

    images, annotations, records = [], [], []
    for i in range(n_images):
        tissue = _tissue_background(rng, height, width)
        lesions = []
        if i in with_lesions:
            for _ in range(int(rng.integers(1, 4))):
                blob, mask = _lesion_blob(rng, height, width)
                tissue = tissue + blob
                lesions.append(Lesion(mask, malignant=True))
        source_id = f"phantom{i:04d}"
        images.append(GrayscaleImage(np.clip(tissue, 0.0, 1.0)))
        annotations.append(lesions)
        records.append(ManifestRecord(
            source_id=source_id,
            path=f"images/{source_id}.png",
            label=MALIGNANT if lesions else NON_MALIGNANT,
            mask_path=f"masks/{source_id}_mask.png" if lesions else None,
        ))
    return images, annotations, build_manifest(records, rng_seed)


def union_mask(lesions, shape):
    mask = np.zeros(shape, dtype=np.uint8)
    for lesion in lesions:
        mask |= (np.asarray(lesion.mask) > 0).astype(np.uint8)
    return mask


# ---------------------------------------------------------------- patch archives

def extract_patches(manifest, count_per_class, seed, config=None, root="."):
    """Resize + sample every manifest image; returns [(Patch, split)] in manifest order."""
    config = config or PipelineConfig()
    root = Path(root)
    out, total_attempts, total_accepted = [], 0, 0
    for label in CLASSES:
        indexed = [(i, r) for i, r in enumerate(manifest.records) if r.label == label]
        if not indexed or count_per_class <= 0:
            continue
        per_image = math.ceil(count_per_class / len(indexed))
        produced = 0
        for i, record in runlog.progress(indexed, desc=f"patches [{label}]", unit="img"):
            if produced >= count_per_class:
                break
            image = resize_to_target(load_grayscale(root / record.path), config.target)
            lesions = []
            if record.mask_path:
                mask = resize_mask(load_mask(root / record.mask_path), image.pixels.shape)
                lesions.append(Lesion(mask, malignant=record.label == MALIGNANT))
            want = min(per_image, count_per_class - produced)
            patches, attempts = _sample(image, lesions, want, derive_seed(seed, i), config, record.source_id)
            total_attempts += attempts
            total_accepted += len(patches)
            runlog.log(f"{record.source_id}: accepted {len(patches)}/{attempts} ({len(patches) / attempts:.1%})", "🧩")
            out.extend((p, record.split) for p in patches)
            produced += len(patches)
    if total_attempts:
        runlog.ok(f"acceptance rate {total_accepted}/{total_attempts} ({total_accepted / total_attempts:.1%})")
    return out


def write_patch_archive(entries, out_dir, seed, generator=None):
    """Write [(Patch, split)] as <source_id>_<index>_{img,mask}.png pairs plus a manifest."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for index, (patch, split) in enumerate(entries):
        stem = f"{patch.source_id}_{index:05d}"
        save_grayscale(patch.image.pixels, out_dir / f"{stem}_img.png", bits=16)
        save_mask(patch.mask, out_dir / f"{stem}_mask.png")
        extra = {"index": index, "synthetic": patch.synthetic}
        if generator is not None:
            extra["generator"] = generator
        records.append(ManifestRecord(patch.source_id, f"{stem}_img.png", patch.label, split, f"{stem}_mask.png", extra))
    manifest = DatasetManifest(records, int(seed))
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def read_patch_archive(archive_dir):
    """Returns (manifest, patches) with patches aligned to manifest.records."""
    archive_dir = Path(archive_dir)
    manifest = read_manifest(archive_dir / MANIFEST_NAME)
    patches = []
    for record in manifest.records:
        try:
            image = load_grayscale(archive_dir / record.path)
            mask = load_mask(archive_dir / record.mask_path) if record.mask_path else np.zeros(
                image.pixels.shape, dtype=np.uint8)
        except FileNotFoundError as e:
            raise DataError(f"patch archive {archive_dir}: missing file {e.filename}")
        patches.append(Patch(image, LesionMask(mask), record.label, record.source_id,
                             bool(record.extra.get("synthetic", False))))
    return manifest, patches


def patches_in_split(manifest, patches, split):
    return [p for r, p in zip(manifest.records, patches) if r.split == split]
