#!/usr/bin/env python3
"""
ciGAN pipeline command line

Commands:
    phantom           synthetic mammogram-like images, masks and manifest
    patches           resize + sample patches from a manifest into a patch archive
    train-gan         pretrain + alternating GAN training (resumable)
    synthesize        lesion insertion/removal for every training patch
    train-classifier  patch classifier under one augmentation scheme
    evaluate          AUC table, pairwise DeLong tests, ROC curves, sample sheets

Usage:
    python cigan.py phantom --n 40 --seed 0 --out work/phantoms
    python cigan.py patches --manifest work/phantoms/manifest.jsonl --count-per-class 200 --config configs/desk.toml --out work/patches
    python cigan.py train-gan --config configs/desk.toml --seed 0
    python cigan.py synthesize --config configs/desk.toml
    python cigan.py train-classifier --config configs/desk.toml --scheme traditional --out work/clf-traditional
    python cigan.py evaluate --config configs/desk.toml --out work/report

Exit codes: 0 ok, 2 usage/config/checkpoint, 3 data, 4 numeric divergence.
"""

import argparse
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

import runlog
from augmentor import donor_masks_from, synthesize_examples
from classifier_harness import ClassifierData, train_classifier, score_patches, write_scores
from errors import CiganError, ConfigError, UsageError
from evaluation import SCHEME_LABELS, SCHEMES, build_report, read_scores, save_roc_curve, write_report
from figures import pick_examples, sample_rows, save_sample_grid, save_sample_sheet
from gan_models import config_fingerprint, load_checkpoint, save_checkpoint
from gan_trainer import GENERATOR_CHECKPOINT, latest_checkpoint, train_gan
from patch_pipeline import (
    MALIGNANT,
    MANIFEST_NAME,
    NON_MALIGNANT,
    extract_patches,
    make_phantom_dataset,
    patches_in_split,
    read_manifest,
    read_patch_archive,
    save_grayscale,
    save_mask,
    union_mask,
    write_manifest,
    write_patch_archive,
)
from settings import describe, load_experiment, parse_experiment, write_run_info


def prepare_out_dir(path, force=False, keep=False):
    """Create `path`; a non-empty directory needs --force (wiped) or `keep` (reused as is)."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not keep:
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to replace it)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def _experiment(args):
    experiment = load_experiment(args.config) if args.config else parse_experiment({})
    if getattr(args, "seed", None) is not None:
        experiment.gan_train = replace(experiment.gan_train, seed=args.seed)
    return experiment


def _seed(args, experiment):
    return args.seed if args.seed is not None else experiment.gan_train.seed


def _parse_size(text):
    try:
        height, width = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 256x256, got '{text}'")
    return height, width


# ---------------------------------------------------------------- commands

def cmd_phantom(args):
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    size = _parse_size(args.size)
    runlog.banner("Phantom dataset", [("images", args.n), ("size", f"{size[0]}x{size[1]}"),
                                      ("lesion rate", args.lesion_rate), ("seed", args.seed), ("out", args.out)])
    out = prepare_out_dir(args.out, args.force)
    images, annotations, manifest = make_phantom_dataset(args.n, size, args.lesion_rate, args.seed)
    os.makedirs(out / "images", exist_ok=True)
    os.makedirs(out / "masks", exist_ok=True)
    for image, lesions, record in zip(images, annotations, manifest.records):
        save_grayscale(image.pixels, out / record.path, bits=16)
        if record.mask_path:
            save_mask(union_mask(lesions, image.pixels.shape), out / record.mask_path)
    write_manifest(manifest, out / MANIFEST_NAME)
    runlog.ok(f"{args.n} phantom images written to {out}")
    runlog.summary([("manifest", out / MANIFEST_NAME), ("splits", manifest.counts())])
    return 0


def cmd_patches(args):
    experiment = _experiment(args)
    config = experiment.pipeline
    if args.patch_size is not None:
        config = replace(config, patch_size=args.patch_size)
    if args.target is not None:
        height, width = _parse_size(args.target)
        config = replace(config, target_height=height, target_width=width)
    config.validate()
    if args.count_per_class < 1:
        raise UsageError(f"--count-per-class must be >= 1, got {args.count_per_class}")
    seed = _seed(args, experiment)

    runlog.banner("Patch extraction", [("manifest", args.manifest), ("count per class", args.count_per_class),
                                       ("seed", seed), *describe_pipeline(config), ("out", args.out)])
    manifest = read_manifest(args.manifest)
    entries = extract_patches(manifest, args.count_per_class, seed, config, root=Path(args.manifest).parent)
    out = prepare_out_dir(args.out, args.force)
    archive = write_patch_archive(entries, out, seed)
    write_run_info(out, replace(experiment, pipeline=config), "patches", seed, manifest=str(args.manifest),
                   count_per_class=args.count_per_class, patch_size=args.patch_size, target=args.target)
    runlog.summary([("archive", out), ("patches", len(entries)), ("splits", archive.counts())])
    return 0


def describe_pipeline(config):
    return [("patch size", config.patch_size), ("target", f"{config.target_height}x{config.target_width}")]


def _load_archive(path, what):
    if not (Path(path) / MANIFEST_NAME).exists():
        raise ConfigError(f"no patch archive at {path}", what)
    return read_patch_archive(path)


def cmd_train_gan(args):
    experiment = _experiment(args)
    out = Path(args.out or experiment.data.gan_run)
    seed = experiment.gan_train.seed
    runlog.banner("ciGAN training", [*describe(experiment, "generator", "gan_train", "losses"), ("out", out)])
    manifest, patches = _load_archive(experiment.data.patches, "data.patches")
    train = patches_in_split(manifest, patches, "train")

    resume = None
    if args.resume:
        resume = latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
    prepare_out_dir(out, args.force, keep=resume is not None)
    write_run_info(out, experiment, "train-gan", seed,
                   fingerprint=config_fingerprint("generator", experiment.generator),
                   resumed_from=str(resume) if resume else None)

    run = train_gan(
        train, out,
        gen_config=experiment.generator,
        disc_config=experiment.discriminator,
        config=experiment.gan_train,
        weights=experiment.losses.weights,
        extractor_spec=experiment.losses.extractor_spec,
        sigma=experiment.losses.boundary_sigma,
        resume=resume,
    )
    runlog.summary([("metrics", out / "metrics.csv"), ("checkpoints", len(run.checkpoints)),
                    ("generator", out / "checkpoints" / GENERATOR_CHECKPOINT)])
    return 0


def _generator(experiment, path=None):
    path = Path(path or Path(experiment.data.gan_run) / "checkpoints" / GENERATOR_CHECKPOINT)
    if not path.exists():
        raise ConfigError(f"generator checkpoint {path} not found", "data.gan_run")
    return load_checkpoint(path, expected_fingerprint=config_fingerprint("generator", experiment.generator))


def cmd_synthesize(args):
    experiment = _experiment(args)
    seed = _seed(args, experiment)
    out = Path(args.out or experiment.data.synthetic)
    runlog.banner("Synthesis", [("patches", experiment.data.patches), ("seed", seed),
                                *describe(experiment, "synthesis"), ("out", out)])
    manifest, patches = _load_archive(experiment.data.patches, "data.patches")
    train = patches_in_split(manifest, patches, "train")
    generator = _generator(experiment, args.checkpoint)
    examples = synthesize_examples(train, generator, seed, donor_masks_from(train),
                                   experiment.generator, experiment.synthesis)
    out = prepare_out_dir(out, args.force)
    write_patch_archive([(e.synthetic, "train") for e in examples], out, seed,
                        generator=generator.config_fingerprint)
    write_run_info(out, experiment, "synthesize", seed, fingerprint=generator.config_fingerprint)
    runlog.summary([("archive", out), ("synthetic patches", len(examples))])
    return 0


def cmd_train_classifier(args):
    experiment = _experiment(args)
    seed = _seed(args, experiment)
    if args.scheme not in SCHEMES:
        raise UsageError(f"--scheme must be one of {', '.join(SCHEMES)}")
    out = prepare_out_dir(args.out, args.force)
    runlog.banner(f"Classifier: {SCHEME_LABELS[args.scheme]}",
                  [("seed", seed), *describe(experiment, "classifier"), ("out", out)])

    manifest, patches = _load_archive(experiment.data.patches, "data.patches")
    synthetic = []
    if args.scheme == "cigan+traditional":
        _, synthetic = _load_archive(experiment.data.synthetic, "data.synthetic")
    data = ClassifierData(
        train=patches_in_split(manifest, patches, "train"),
        val=patches_in_split(manifest, patches, "val"),
        test=patches_in_split(manifest, patches, "test"),
        synthetic=synthetic,
    )
    run = train_classifier(args.scheme, data, experiment.classifier, seed,
                           experiment.curriculum, experiment.augmentation)

    os.makedirs(out / "checkpoints", exist_ok=True)
    save_checkpoint(run.params, out / "checkpoints" / "best.ckpt")
    run.metrics.to_csv(out / "metrics.csv", index=False)
    outputs = [("metrics", out / "metrics.csv"), ("checkpoint", out / "checkpoints" / "best.ckpt")]
    if data.test:
        write_scores(out / "scores.csv", data.test, score_patches(run.model, data.test))
        outputs.append(("scores", out / "scores.csv"))
    else:
        runlog.warn("test split is empty; no scores written")
    write_run_info(out, experiment, "train-classifier", seed, scheme=args.scheme,
                   fingerprint=run.params.config_fingerprint, best_iteration=run.best_iteration,
                   best_val_auc=None if np.isnan(run.best_val_auc) else run.best_val_auc)
    runlog.summary(outputs)
    return 0


def _runs(args, experiment):
    runs = dict(experiment.evaluate.runs)
    for item in args.run or []:
        scheme, sep, run_dir = item.partition("=")
        if not sep or not run_dir:
            raise UsageError(f"--run expects SCHEME=DIR, got '{item}'")
        runs[scheme] = run_dir
    if not runs:
        raise UsageError("no runs to evaluate (use --run SCHEME=DIR or [evaluate].runs)")
    return {s: runs[s] for s in SCHEMES if s in runs} | {s: d for s, d in runs.items() if s not in SCHEMES}


def cmd_evaluate(args):
    experiment = _experiment(args)
    runs = _runs(args, experiment)
    out = prepare_out_dir(args.out, args.force)
    runlog.banner("Evaluation", [*((SCHEME_LABELS.get(s, s), d) for s, d in runs.items()), ("out", out)])

    report = build_report(runs)
    written = write_report(report, out)
    write_run_info(out, experiment, "evaluate", experiment.gan_train.seed,
                   runs={s: str(d) for s, d in runs.items()})
    os.makedirs(out / "figures", exist_ok=True)
    for scheme, run_dir in runs.items():
        frame = read_scores(run_dir)
        safe = scheme.replace("+", "_")
        written.append(save_roc_curve(frame["score"], frame["label"], out / "figures" / f"roc_{safe}.png",
                                      SCHEME_LABELS.get(scheme, scheme)))

    checkpoint = Path(experiment.data.gan_run) / "checkpoints" / GENERATOR_CHECKPOINT
    archive = Path(experiment.data.patches)
    if experiment.evaluate.sample_rows and checkpoint.exists() and (archive / MANIFEST_NAME).exists():
        manifest, patches = read_patch_archive(archive)
        train = patches_in_split(manifest, patches, "train")
        test = patches_in_split(manifest, patches, "test")
        candidates = _examples_by_class(test, experiment.evaluate.sample_rows)
        if candidates:
            examples = synthesize_examples(candidates, _generator(experiment), experiment.gan_train.seed,
                                           donor_masks_from(train), experiment.generator, experiment.synthesis)
            rows = sample_rows(pick_examples(examples, experiment.evaluate.sample_rows))
            written.append(save_sample_grid(rows, out / "figures" / "samples.png"))
            written.append(save_sample_sheet(rows, out / "figures" / "samples.pdf"))
    else:
        runlog.log("no generator checkpoint or patch archive configured; skipping sample sheets")

    if not runlog.QUIET:
        print()
        print((out / "report.txt").read_text(), end="")
    runlog.summary([("files", len(written)), *((p.name, p) for p in written)])
    return 0


def _examples_by_class(patches, per_class):
    malignant = [p for p in patches if p.label == MALIGNANT and not p.mask.is_empty][:per_class]
    benign = [p for p in patches if p.label == NON_MALIGNANT][:per_class]
    return malignant + benign


# ---------------------------------------------------------------- entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="cigan", description="ciGAN lesion infilling pipeline")
    parser.add_argument("--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--size", default="256x256")
    p.add_argument("--lesion-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("patches", help="extract patches from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count-per-class", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--target", help="resize box HxW, e.g. 1375x750")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_patches)

    p = sub.add_parser("train-gan", help="train generator and discriminator")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="training checkpoint to resume from, or 'latest'")
    p.add_argument("--out", help="run directory (default: [data].gan_run)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_train_gan)

    p = sub.add_parser("synthesize", help="build the synthetic training set")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="generator checkpoint (default: [data].gan_run)")
    p.add_argument("--out", help="archive directory (default: [data].synthetic)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("train-classifier", help="train the patch classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--scheme", required=True, choices=SCHEMES)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="compare classifier runs")
    p.add_argument("--config")
    p.add_argument("--run", action="append", metavar="SCHEME=DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    runlog.set_quiet(args.quiet)
    try:
        return args.handler(args)
    except CiganError as e:
        runlog.fail(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        runlog.warn("interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
