#!/usr/bin/env python3
"""
Tests for gan_models: architecture shapes, compositing, checkpoints
"""

import numpy as np
import pytest
import torch

from errors import CheckpointIncompatibleError, ConfigError, CorruptCheckpointError
from gan_models import (
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    build_discriminator,
    build_generator,
    composite,
    discriminate,
    discriminator_kernels,
    generate,
    generator_block_kernels,
    load_checkpoint,
    load_generator,
    save_checkpoint,
)
from patch_pipeline import MALIGNANT, NON_MALIGNANT, LesionMask, build_conditioned_input
from conftest import make_patch


def _conv_params(in_ch, out_ch, k=3):
    return in_ch * out_ch * k * k + out_ch


def _cascade_params(kernels, input_channels=4):
    total, in_ch = 0, input_channels
    for out_ch in kernels:
        total += _conv_params(in_ch, out_ch) + _conv_params(out_ch, out_ch)
        in_ch = out_ch + input_channels
    return total + _conv_params(kernels[-1], 1, k=1)


def test_default_generator_has_seven_blocks():
    params = build_generator(GeneratorConfig(), init_seed=0)
    assert generator_block_kernels(params) == [128, 128, 64, 64, 32, 32, 32]
    assert params.tensors["head.weight"].shape[0] == 1


def test_toy_generator_parameter_count(toy_gen_config):
    params = build_generator(toy_gen_config, init_seed=0)
    assert generator_block_kernels(params) == [8, 8, 4]
    assert params.parameter_count() == 2925 == _cascade_params([8, 8, 4])


def test_second_config_parameter_count():
    config = GeneratorConfig(base_resolution=4, final_resolution=8, block_kernel_counts=(2, 2))
    assert build_generator(config).parameter_count() == 263 == _cascade_params([2, 2])


@pytest.mark.parametrize("field, config", [
    ("generator.final_resolution", GeneratorConfig(final_resolution=100)),
    ("generator.block_kernel_counts", GeneratorConfig(block_kernel_counts=(8, 8))),
    ("discriminator.input_resolution", DiscriminatorConfig(input_resolution=48)),
])
def test_invalid_configs_name_the_field(field, config):
    with pytest.raises(ConfigError, match=field):
        config.validate()


def test_default_discriminator_layout():
    config = DiscriminatorConfig()
    assert config.kernel_counts == [32, 64, 128, 256, 512]
    assert config.final_spatial == 8
    assert discriminator_kernels(build_discriminator(config)) == [32, 64, 128, 256, 512]
    assert DiscriminatorConfig(input_resolution=32).final_spatial == 1


def test_discriminator_sees_three_channels(toy_disc_config):
    module = PatchDiscriminator(toy_disc_config)
    assert module.features[0].in_channels == 3
    out = module(torch.rand(3, 1, 16, 16), [0, 1, 1])
    assert out.shape == (3,)


def test_generate_shape_range_and_determinism(toy_gen_config):
    params = build_generator(toy_gen_config, init_seed=1)
    patch = make_patch(MALIGNANT, seed=3)
    cond = build_conditioned_input(patch, patch.mask, NON_MALIGNANT, rng_seed=0)
    first = generate(params, cond, toy_gen_config)
    second = generate(params, cond, toy_gen_config)
    assert first.shape == (16, 16)
    assert first.min() >= 0.0 and first.max() <= 1.0
    assert np.array_equal(first, second)


def test_generate_rejects_other_config(toy_gen_config):
    params = build_generator(toy_gen_config)
    other = GeneratorConfig(base_resolution=4, final_resolution=16, block_kernel_counts=(8, 8, 8))
    with pytest.raises(CheckpointIncompatibleError):
        load_generator(params, other)


def test_composite_mask_extremes():
    patch = make_patch(NON_MALIGNANT, seed=5)
    raw = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    untouched = composite(raw, patch, LesionMask.empty(16), MALIGNANT)
    assert np.array_equal(untouched.image.pixels, patch.image.pixels)
    assert untouched.synthetic and untouched.label == MALIGNANT
    full = composite(raw, patch, LesionMask(np.ones((16, 16), dtype=np.uint8)), MALIGNANT)
    assert np.array_equal(full.image.pixels, raw)


def test_composite_changes_at_most_the_masked_pixels():
    patch = make_patch(MALIGNANT, seed=6)
    raw = np.random.default_rng(1).random((16, 16)).astype(np.float32)
    out = composite(raw, patch, patch.mask, NON_MALIGNANT)
    assert np.count_nonzero(out.image.pixels != patch.image.pixels) <= patch.mask.area
    again = composite(raw, out, patch.mask, NON_MALIGNANT)
    assert np.array_equal(again.image.pixels, out.image.pixels)


def test_composite_keeps_the_background_bitwise():
    rng = np.random.default_rng(2)
    for i in range(100):
        patch = make_patch(NON_MALIGNANT, seed=i, size=32)
        mask = (rng.random((32, 32)) < rng.random()).astype(np.uint8)
        raw = rng.random((32, 32)).astype(np.float32)
        out = composite(raw, patch, LesionMask(mask), MALIGNANT).image.pixels
        outside = mask == 0
        assert np.array_equal(out[outside], patch.image.pixels[outside])
        assert np.array_equal(out[~outside], raw[~outside])


def test_discriminate_is_a_probability(toy_disc_config):
    params = build_discriminator(toy_disc_config, init_seed=2)
    image = make_patch(MALIGNANT).image.pixels
    p = discriminate(params, image, MALIGNANT, toy_disc_config)
    assert 0.0 < p < 1.0
    assert p == discriminate(params, image, MALIGNANT, toy_disc_config)


def test_checkpoint_roundtrip(tmp_path, toy_gen_config):
    params = build_generator(toy_gen_config, init_seed=4)
    path = tmp_path / "g.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path, expected_fingerprint=params.config_fingerprint)
    assert loaded.config_fingerprint == params.config_fingerprint
    assert set(loaded.tensors) == set(params.tensors)
    for name, tensor in params.tensors.items():
        assert torch.equal(loaded.tensors[name], tensor)


def test_checkpoint_wrong_fingerprint(tmp_path, toy_gen_config):
    path = tmp_path / "g.ckpt"
    save_checkpoint(build_generator(toy_gen_config), path)
    with pytest.raises(CheckpointIncompatibleError):
        load_checkpoint(path, expected_fingerprint="0" * 64)


def test_truncated_checkpoint_is_corrupt(tmp_path, toy_gen_config):
    path = tmp_path / "g.ckpt"
    save_checkpoint(build_generator(toy_gen_config), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_payload_byte_is_corrupt(tmp_path, toy_gen_config):
    path = tmp_path / "g.ckpt"
    save_checkpoint(build_generator(toy_gen_config, init_seed=4), path)
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        load_checkpoint(path)


def test_composite_is_idempotent():
    rng = np.random.default_rng(3)
    for i in range(20):
        patch = make_patch(MALIGNANT if i % 2 else NON_MALIGNANT, seed=i)
        mask = LesionMask((rng.random((16, 16)) < 0.3).astype(np.uint8))
        raw = rng.random((16, 16)).astype(np.float32)
        once = composite(raw, patch, mask, NON_MALIGNANT)
        twice = composite(raw, once, mask, NON_MALIGNANT)
        assert np.array_equal(twice.image.pixels, once.image.pixels)
        assert np.array_equal(twice.mask.pixels, once.mask.pixels)


@pytest.mark.parametrize("bias", [-1000.0, -40.0, 40.0, 1000.0])
def test_discriminate_stays_inside_the_open_interval(toy_disc_config, bias):
    params = build_discriminator(toy_disc_config, init_seed=2)
    params.tensors["head.weight"] = torch.zeros_like(params.tensors["head.weight"])
    params.tensors["head.bias"] = torch.full_like(params.tensors["head.bias"], bias)
    p = discriminate(params, make_patch(MALIGNANT).image.pixels, MALIGNANT, toy_disc_config)
    assert 0.0 < p < 1.0
