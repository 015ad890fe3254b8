#!/usr/bin/env python3
"""
End-to-end tests for the cigan command line on a toy phantom dataset
"""

import json
from pathlib import Path

import pandas as pd
import pytest
from PIL import Image

from cigan import main
from evaluation import build_report
from patch_pipeline import MANIFEST_NAME, read_manifest, read_patch_archive

TOY_CONFIG = """
[data]
patches = "{root}/patches"
synthetic = "{root}/synthetic"
gan_run = "{root}/gan"

[pipeline]
patch_size = 16
target_height = 64
target_width = 64

[generator]
base_resolution = 4
final_resolution = 16
block_kernel_counts = [8, 8, 4]

[discriminator]
input_resolution = 16
first_kernels = 4
n_conv_layers = 2

[losses]
boundary_sigma = 2.0

[gan_train]
batch_size = 2
pretrain_iters = 2
joint_iters = 3
checkpoint_every = 5
seed = 0

[classifier]
batch_size = 4
iterations = 4
validate_every = 2
widths = [4, 4]

[evaluate]
sample_rows = 2
"""


def _run(*argv):
    return main(["--quiet", *argv])


def _phantoms(root, n=20, *extra):
    return _run("phantom", "--n", str(n), "--size", "64x64", "--seed", "0", "--out", str(root / "phantoms"), *extra)


def test_phantom_is_reproducible_with_force(tmp_path):
    assert _phantoms(tmp_path) == 0
    first = (tmp_path / "phantoms" / MANIFEST_NAME).read_bytes()
    assert _phantoms(tmp_path, 20, "--force") == 0
    assert (tmp_path / "phantoms" / MANIFEST_NAME).read_bytes() == first


def test_phantom_refuses_a_non_empty_directory(tmp_path):
    assert _phantoms(tmp_path) == 0
    assert _phantoms(tmp_path) == 2


def test_phantom_needs_images(tmp_path):
    assert _phantoms(tmp_path, 0) == 2


def test_phantom_without_lesions(tmp_path):
    assert _phantoms(tmp_path, 6, "--lesion-rate", "0") == 0
    manifest = read_manifest(tmp_path / "phantoms" / MANIFEST_NAME)
    assert not any(r.mask_path for r in manifest.records)


def test_patches_command(tmp_path):
    assert _phantoms(tmp_path) == 0
    code = _run("patches", "--manifest", str(tmp_path / "phantoms" / MANIFEST_NAME), "--count-per-class", "10",
                "--patch-size", "16", "--target", "64x64", "--seed", "0", "--out", str(tmp_path / "patches"))
    assert code == 0
    manifest, patches = read_patch_archive(tmp_path / "patches")
    assert len(patches) == 20
    assert all(p.image.pixels.shape == (16, 16) for p in patches)
    assert {r.split for r in manifest.records} <= {"train", "val", "test"}
    info = json.loads((tmp_path / "patches" / "run.json").read_text())
    assert info["command"] == "patches" and info["count_per_class"] == 10
    assert info["manifest"] == str(tmp_path / "phantoms" / MANIFEST_NAME)
    assert info["resolved"]["pipeline"]["patch_size"] == 16
    assert (info["resolved"]["pipeline"]["target_height"], info["resolved"]["pipeline"]["target_width"]) == (64, 64)
    assert not (tmp_path / "patches" / "config.snapshot").exists()


def test_unknown_config_key(tmp_path):
    config = tmp_path / "bad.toml"
    config.write_text("[gan_train]\nbatch_sise = 4\n")
    assert _run("train-gan", "--config", str(config)) == 2


def test_missing_patch_archive(tmp_path):
    config = tmp_path / "toy.toml"
    config.write_text(TOY_CONFIG.format(root=tmp_path.as_posix()))
    assert _run("train-gan", "--config", str(config)) == 2


@pytest.fixture
def toy_experiment(tmp_path):
    config = tmp_path / "toy.toml"
    config.write_text(TOY_CONFIG.format(root=tmp_path.as_posix()))
    assert _phantoms(tmp_path) == 0
    assert _run("patches", "--manifest", str(tmp_path / "phantoms" / MANIFEST_NAME), "--count-per-class", "20",
                "--config", str(config), "--out", str(tmp_path / "patches")) == 0
    return config


def test_full_pipeline(tmp_path, toy_experiment):
    config = str(toy_experiment)
    assert _run("train-gan", "--config", config) == 0
    assert _run("train-gan", "--config", config, "--out", str(tmp_path / "gan-again")) == 0
    first = (tmp_path / "gan" / "metrics.csv").read_bytes()
    assert (tmp_path / "gan-again" / "metrics.csv").read_bytes() == first
    assert len(pd.read_csv(tmp_path / "gan" / "metrics.csv")) == 5
    info = json.loads((tmp_path / "gan" / "run.json").read_text())
    assert info["command"] == "train-gan" and info["seed"] == 0
    assert (tmp_path / "gan" / "config.snapshot").read_bytes() == toy_experiment.read_bytes()

    assert _run("synthesize", "--config", config) == 0
    _, train = read_patch_archive(tmp_path / "patches")
    _, synthetic = read_patch_archive(tmp_path / "synthetic")
    assert 0 < len(synthetic) <= len(train)

    runs = {"none": "clf-none", "traditional": "clf-traditional", "cigan+traditional": "clf-cigan"}
    for scheme, name in runs.items():
        assert _run("train-classifier", "--config", config, "--scheme", scheme, "--out", str(tmp_path / name)) == 0
        scores = pd.read_csv(tmp_path / name / "scores.csv")
        assert list(scores.columns) == ["id", "label", "score"]

    run_args = [arg for scheme, name in runs.items() for arg in ("--run", f"{scheme}={tmp_path / name}")]
    assert _run("evaluate", "--config", config, *run_args, "--out", str(tmp_path / "report")) == 0
    assert (tmp_path / "report" / "config.snapshot").read_bytes() == toy_experiment.read_bytes()
    assert (tmp_path / "patches" / "config.snapshot").read_bytes() == toy_experiment.read_bytes()
    report_info = json.loads((tmp_path / "report" / "run.json").read_text())
    assert set(report_info["runs"]) == set(runs)
    assert len(pd.read_csv(tmp_path / "report" / "report.csv")) == 3
    assert len(pd.read_csv(tmp_path / "report" / "pairwise.csv")) == 3
    assert (tmp_path / "report" / "figures" / "roc_cigan_traditional.png").exists()
    with Image.open(tmp_path / "report" / "figures" / "samples.png") as grid:
        assert grid.width == 3 * 16 + 4 * 4
    assert (tmp_path / "report" / "figures" / "samples.pdf").exists()


def test_resume_latest(tmp_path, toy_experiment):
    config = str(toy_experiment)
    assert _run("train-gan", "--config", config) == 0
    first = (tmp_path / "gan" / "metrics.csv").read_bytes()
    assert _run("train-gan", "--config", config, "--resume", "latest") == 0
    assert (tmp_path / "gan" / "metrics.csv").read_bytes() == first


def _desk_run(root, seed):
    desk = (Path(__file__).parent / "configs" / "desk.toml").read_text()
    text = desk.replace('"work/', f'"{root.as_posix()}/').replace("\nseed = 0\n", f"\nseed = {seed}\n")
    config = root / "desk.toml"
    root.mkdir(parents=True)
    config.write_text(text)
    steps = [
        ("phantom", "--n", "40", "--size", "256x256", "--seed", str(seed), "--out", str(root / "phantoms")),
        ("patches", "--manifest", str(root / "phantoms" / MANIFEST_NAME), "--count-per-class", "200",
         "--config", str(config), "--out", str(root / "patches")),
        ("train-gan", "--config", str(config)),
        ("synthesize", "--config", str(config)),
    ]
    runs = {"none": root / "clf-none", "traditional": root / "clf-traditional",
            "cigan+traditional": root / "clf-cigan"}
    steps += [("train-classifier", "--config", str(config), "--scheme", s, "--out", str(d)) for s, d in runs.items()]
    for step in steps:
        assert _run(*step) == 0, step
    return build_report(runs)


@pytest.mark.slow
def test_desk_scale_augmentation_benefit(tmp_path):
    reports = [_desk_run(tmp_path / f"seed{seed}", seed) for seed in range(3)]
    for report in reports:
        assert report.aucs["traditional"] >= 0.9
        assert report.aucs["none"] >= 0.9
        assert report.aucs["cigan+traditional"] >= 0.9
    wins = sum(r.aucs["cigan+traditional"] >= r.aucs["none"] for r in reports)
    assert wins >= 2
