#!/usr/bin/env python3
"""
ciGAN networks: cascading multi-scale conditional generator + convolutional discriminator

Features:
- Generator: coarse-to-fine blocks (4x4 -> 256x256), each re-injecting the resized input stack
- Discriminator: 5 conv + 2x2 max-pool stages (32 -> 512 kernels), sigmoid head,
  class conditioning by concatenated class planes
- Compositing of generator output into the source patch (infill only inside the mask)
- Versioned binary checkpoints ("CIGN") with config fingerprints
"""

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, is_dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import (
    CheckpointIncompatibleError,
    ConfigError,
    CorruptCheckpointError,
    InvalidInputError,
)
from patch_pipeline import GrayscaleImage, LesionMask, Patch, class_index

GENERATOR_KERNELS = (128, 128, 64, 64, 32, 32, 32)
LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"CIGN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI32sQI")
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "|u1"}
_DTYPE_CODES = {name: code for code, name in _DTYPES.items()}


def _is_power_of_two(n):
    return isinstance(n, int) and n >= 1 and (n & (n - 1)) == 0


def config_fingerprint(*configs):
    """SHA-256 (hex) over the canonical JSON of one or more configs."""
    payload = [asdict(c) if is_dataclass(c) else c for c in configs]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def configure_determinism():
    torch.use_deterministic_algorithms(True)


@dataclass
class GeneratorConfig:
    base_resolution: int = 4
    final_resolution: int = 256
    block_kernel_counts: tuple = GENERATOR_KERNELS
    kernel_size: int = 3
    input_channels: int = 4

    @property
    def n_blocks(self):
        return int(round(math.log2(self.final_resolution / self.base_resolution))) + 1

    @property
    def scales(self):
        return [self.base_resolution * 2 ** i for i in range(self.n_blocks)]

    def validate(self, prefix="generator"):
        if not _is_power_of_two(self.base_resolution):
            raise ConfigError(f"must be a power of two, got {self.base_resolution}", f"{prefix}.base_resolution")
        if not _is_power_of_two(self.final_resolution) or self.final_resolution < self.base_resolution:
            raise ConfigError(
                f"must be a power of two >= base_resolution, got {self.final_resolution}",
                f"{prefix}.final_resolution",
            )
        if len(self.block_kernel_counts) != self.n_blocks:
            raise ConfigError(
                f"{self.n_blocks} blocks needed for {self.base_resolution}->{self.final_resolution}, "
                f"got {len(self.block_kernel_counts)} kernel counts",
                f"{prefix}.block_kernel_counts",
            )
        if any(int(k) < 1 for k in self.block_kernel_counts):
            raise ConfigError("kernel counts must be >= 1", f"{prefix}.block_kernel_counts")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("must be a positive odd number", f"{prefix}.kernel_size")
        return self


@dataclass
class DiscriminatorConfig:
    input_resolution: int = 256
    first_kernels: int = 32
    n_conv_layers: int = 5
    kernel_size: int = 3
    leaky_slope: float = LEAKY_SLOPE

    @property
    def kernel_counts(self):
        return [self.first_kernels * 2 ** i for i in range(self.n_conv_layers)]

    @property
    def final_spatial(self):
        return self.input_resolution // 2 ** self.n_conv_layers

    def validate(self, prefix="discriminator"):
        if not _is_power_of_two(self.input_resolution):
            raise ConfigError(f"must be a power of two, got {self.input_resolution}", f"{prefix}.input_resolution")
        if self.n_conv_layers < 1 or self.input_resolution < 2 ** self.n_conv_layers:
            raise ConfigError(
                f"{self.n_conv_layers} pooling stages do not fit a {self.input_resolution} input",
                f"{prefix}.n_conv_layers",
            )
        if self.first_kernels < 1:
            raise ConfigError("must be >= 1", f"{prefix}.first_kernels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("must be a positive odd number", f"{prefix}.kernel_size")
        if self.leaky_slope < 0:
            raise ConfigError("must be >= 0", f"{prefix}.leaky_slope")
        return self


@dataclass
class NetworkParams:
    tensors: dict
    config_fingerprint: str
    iteration: int = 0

    def __post_init__(self):
        for name, tensor in self.tensors.items():
            if tensor.is_floating_point() and not torch.isfinite(tensor).all():
                raise InvalidInputError(f"tensor '{name}' contains non-finite values")

    def parameter_count(self, prefix=""):
        return sum(t.numel() for name, t in self.tensors.items() if name.startswith(prefix))

    def subset(self, prefix):
        """Tensors under `prefix/`, with the prefix stripped."""
        cut = len(prefix) + 1
        return {name[cut:]: t for name, t in self.tensors.items() if name.startswith(prefix + "/")}

    def checksum(self, prefix=""):
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            if name.startswith(prefix):
                digest.update(name.encode("utf-8"))
                digest.update(self.tensors[name].detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def init_weights(module, seed):
    """Seeded fan-in scaled uniform init; biases start at zero."""
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for _, param in module.named_parameters():
            if param.dim() > 1:
                fan_in = param[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                param.uniform_(-bound, bound, generator=generator)
            else:
                param.zero_()
    return module


def _conv(in_ch, out_ch, kernel_size):
    return nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2)


class CascadeGenerator(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        blocks = []
        in_ch = config.input_channels
        for kernels in config.block_kernel_counts:
            blocks.append(nn.Sequential(
                _conv(in_ch, kernels, config.kernel_size),
                nn.ReLU(),
                _conv(kernels, kernels, config.kernel_size),
                nn.ReLU(),
            ))
            in_ch = kernels + config.input_channels
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(config.block_kernel_counts[-1], 1, kernel_size=1)

    def forward(self, stack):
        if stack.shape[-1] != self.config.final_resolution or stack.shape[-2] != self.config.final_resolution:
            raise InvalidInputError(
                f"generator expects {self.config.final_resolution}x{self.config.final_resolution} input, "
                f"got {tuple(stack.shape[-2:])}"
            )
        features = None
        for scale, block in zip(self.config.scales, self.blocks):
            resized = stack if scale == stack.shape[-1] else F.adaptive_avg_pool2d(stack, scale)
            if features is not None:
                features = F.interpolate(features, scale_factor=2, mode="nearest")
                resized = torch.cat([features, resized], dim=1)
            features = block(resized)
        return torch.sigmoid(self.head(features))


def class_planes(classes, size, dtype=torch.float32):
    """(B,) class indices -> (B, 2, size, size) one-hot constant planes."""
    classes = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    onehot = F.one_hot(classes, num_classes=2).to(dtype)
    return onehot[:, :, None, None].expand(-1, -1, size, size)


class PatchDiscriminator(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        layers = []
        in_ch = 3
        for kernels in config.kernel_counts:
            layers += [
                _conv(in_ch, kernels, config.kernel_size),
                nn.LeakyReLU(config.leaky_slope),
                nn.MaxPool2d(2),
            ]
            in_ch = kernels
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch * config.final_spatial ** 2, 1)

    def logits(self, images, classes):
        size = self.config.input_resolution
        if images.shape[-1] != size or images.shape[-2] != size:
            raise InvalidInputError(f"discriminator expects {size}x{size} images, got {tuple(images.shape[-2:])}")
        x = torch.cat([images, class_planes(classes, size, images.dtype)], dim=1)
        return self.head(self.features(x).flatten(1)).squeeze(1)

    def forward(self, images, classes):
        return torch.sigmoid(self.logits(images, classes))


# ---------------------------------------------------------------- params <-> modules

def network_params(module, fingerprint, iteration=0, prefix=None):
    tensors = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}/{name}" if prefix else name
        tensors[key] = tensor.detach().clone()
    return NetworkParams(tensors, fingerprint, iteration)


def _check_fingerprint(params, expected, what):
    if params.config_fingerprint != expected:
        raise CheckpointIncompatibleError(
            f"{what} parameters were produced by config {params.config_fingerprint[:12]}, "
            f"expected {expected[:12]}"
        )


def build_generator(config=None, init_seed=0):
    config = (config or GeneratorConfig()).validate()
    module = init_weights(CascadeGenerator(config), init_seed)
    return network_params(module, config_fingerprint("generator", config))


def build_discriminator(config=None, init_seed=0):
    config = (config or DiscriminatorConfig()).validate()
    module = init_weights(PatchDiscriminator(config), init_seed)
    return network_params(module, config_fingerprint("discriminator", config))


def load_generator(params, config=None):
    config = config or GeneratorConfig()
    _check_fingerprint(params, config_fingerprint("generator", config), "generator")
    module = CascadeGenerator(config)
    module.load_state_dict(params.tensors)
    return module.eval()


def load_discriminator(params, config=None):
    config = config or DiscriminatorConfig()
    _check_fingerprint(params, config_fingerprint("discriminator", config), "discriminator")
    module = PatchDiscriminator(config)
    module.load_state_dict(params.tensors)
    return module.eval()


def generator_block_kernels(params):
    counts, i = [], 0
    while f"blocks.{i}.0.weight" in params.tensors:
        counts.append(int(params.tensors[f"blocks.{i}.2.weight"].shape[0]))
        i += 1
    return counts


def discriminator_kernels(params):
    return [int(t.shape[0]) for name, t in params.tensors.items()
            if name.startswith("features.") and name.endswith(".weight")]


# ---------------------------------------------------------------- inference

def generate(params, conditioned, config=None):
    """Full-frame generator output (H, W) in [0, 1] for one conditioned input."""
    module = load_generator(params, config)
    channels = np.asarray(conditioned.channels, dtype=np.float32)
    if channels.ndim != 3 or channels.shape[0] != 4:
        raise InvalidInputError(f"conditioned input must be 4xHxW, got {channels.shape}")
    with torch.no_grad():
        out = module(torch.from_numpy(channels)[None])
    return out[0, 0].numpy()


def composite(raw_output, patch, mask, target_class):
    """mask * raw + (1 - mask) * patch; exact copy of the patch outside the mask."""
    raw = np.asarray(raw_output, dtype=np.float32)
    if raw.shape != patch.image.pixels.shape or mask.shape != raw.shape:
        raise InvalidInputError(
            f"shape mismatch: raw {raw.shape}, patch {patch.image.pixels.shape}, mask {mask.shape}"
        )
    pixels = np.where(mask.pixels.astype(bool), raw, patch.image.pixels)
    return Patch(GrayscaleImage(pixels), LesionMask(mask.pixels), target_class, patch.source_id, synthetic=True)


def composite_tensor(raw, real, mask):
    return mask * raw + (1.0 - mask) * real


def discriminate(params, image, cond_class, config=None):
    config = config or DiscriminatorConfig()
    module = load_discriminator(params, config)
    pixels = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if pixels.ndim != 2:
        raise InvalidInputError(f"image must be 2-D, got shape {tuple(pixels.shape)}")
    with torch.no_grad():
        logit = module.logits(pixels[None, None], [class_index(cond_class)])[0].double()
    # open interval even for saturated logits
    return float(np.clip(torch.sigmoid(logit).item(), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params, path):
    """Write magic, version, fingerprint, iteration, a tensor table, a payload sha256, then raw payloads."""
    table, payloads, offset = [], [], 0
    for name, tensor in params.tensors.items():
        array = tensor.detach().cpu().numpy()
        dtype = array.dtype.newbyteorder("<")
        if dtype.str not in _DTYPE_CODES:
            raise InvalidInputError(f"tensor '{name}' has unsupported dtype {array.dtype}")
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()
        encoded = name.encode("utf-8")
        entry = struct.pack("<H", len(encoded)) + encoded
        entry += struct.pack("<BB", _DTYPE_CODES[dtype.str], array.ndim)
        entry += struct.pack(f"<{array.ndim}Q", *array.shape)
        entry += struct.pack("<QQ", offset, len(data))
        table.append(entry)
        payloads.append(data)
        offset += len(data)
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        bytes.fromhex(params.config_fingerprint),
        int(params.iteration),
        len(table),
    )
    body = b"".join(payloads)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(b"".join(table))
        fh.write(hashlib.sha256(body).digest())
        fh.write(body)
    os.replace(tmp, path)


def load_checkpoint(path, expected_fingerprint=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, digest, iteration, count = _HEADER.unpack_from(blob, 0)
    except struct.error:
        raise CorruptCheckpointError(f"{path}: truncated header")
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a ciGAN checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointIncompatibleError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")

    entries, pos = [], _HEADER.size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise struct.error("name")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            entries.append((name, code, shape, offset, nbytes))
    except (struct.error, UnicodeDecodeError):
        raise CorruptCheckpointError(f"{path}: truncated tensor table")

    expected_digest = blob[pos:pos + 32]
    pos += 32
    if len(expected_digest) != 32 or hashlib.sha256(blob[pos:]).digest() != expected_digest:
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")

    tensors = {}
    for name, code, shape, offset, nbytes in entries:
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        dtype = np.dtype(_DTYPES[code])
        start = pos + offset
        if start + nbytes > len(blob) or nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"{path}: tensor '{name}' payload is truncated")
        array = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        tensors[name] = torch.from_numpy(array.reshape(shape).copy())

    params = NetworkParams(tensors, digest.hex(), iteration)
    if expected_fingerprint is not None and params.config_fingerprint != expected_fingerprint:
        raise CheckpointIncompatibleError(
            f"{path}: checkpoint fingerprint {params.config_fingerprint[:12]} does not match "
            f"config fingerprint {expected_fingerprint[:12]}"
        )
    return params
