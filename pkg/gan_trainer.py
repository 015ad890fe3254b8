#!/usr/bin/env python3
"""
ciGAN training loop

Phases:
- pretrain: generator only, feature loss on the composited output
- joint: generator and discriminator alternate; the active network hands over
  once its loss from the step just taken drops below the switch threshold

Every iteration appends one metrics row; training-state checkpoints bundle
both networks, both Adam states and the alternation state so a run can be
resumed bit-identically.
"""

import hashlib
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch

import runlog
from augmentor import donor_masks_from, transplant_mask
from errors import ConfigError, DataError, DivergenceError, InvalidInputError
from gan_models import (
    CascadeGenerator,
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    composite_tensor,
    config_fingerprint,
    configure_determinism,
    init_weights,
    load_checkpoint,
    network_params,
    save_checkpoint,
)
from losses import (
    BOUNDARY_SIGMA,
    LossWeights,
    adversarial_losses,
    boundary_loss,
    boundary_weight,
    feature_loss,
    make_extractor,
    total_generator_loss,
)
from patch_pipeline import CLASSES, MALIGNANT, build_conditioned_input, class_index, derive_seed

LEARNING_RATE = 1e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
BATCH_SIZE = 8
PRETRAIN_ITERS = 10_000
JOINT_ITERS = 100_000
SWITCH_THRESHOLD = 0.3
LIVELOCK_CAP = 500
CHECKPOINT_EVERY = 5_000
BOUNDARY_CACHE_SIZE = 2048  # masks

PRETRAIN = "pretrain"
JOINT = "joint"
GENERATOR = "generator"
DISCRIMINATOR = "discriminator"

METRICS_COLUMNS = ["iteration", "phase", "active", "g_loss", "d_loss", "feat", "bound", "adv"]
METRICS_NAME = "metrics.csv"
GENERATOR_CHECKPOINT = "generator.ckpt"


@dataclass
class GanTrainConfig:
    learning_rate: float = LEARNING_RATE
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    adam_eps: float = ADAM_EPS
    batch_size: int = BATCH_SIZE
    pretrain_iters: int = PRETRAIN_ITERS
    joint_iters: int = JOINT_ITERS
    switch_threshold: float = SWITCH_THRESHOLD
    livelock_cap: int = LIVELOCK_CAP
    checkpoint_every: int = CHECKPOINT_EVERY
    initial_active: str = DISCRIMINATOR
    reposition_donors: bool = False
    seed: int = 0

    @property
    def total_iters(self):
        return self.pretrain_iters + self.joint_iters

    def validate(self, prefix="gan_train"):
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", f"{prefix}.learning_rate")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError("must be in [0, 1)", f"{prefix}.{name}")
        if not self.adam_eps > 0:
            raise ConfigError("must be > 0", f"{prefix}.adam_eps")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", f"{prefix}.batch_size")
        if self.pretrain_iters < 0 or self.joint_iters < 0:
            raise ConfigError("iteration counts must be >= 0", f"{prefix}.pretrain_iters")
        if not self.switch_threshold > 0:
            raise ConfigError("must be > 0", f"{prefix}.switch_threshold")
        if self.livelock_cap < 1:
            raise ConfigError("must be >= 1", f"{prefix}.livelock_cap")
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", f"{prefix}.checkpoint_every")
        if self.initial_active not in (GENERATOR, DISCRIMINATOR):
            raise ConfigError(f"must be '{GENERATOR}' or '{DISCRIMINATOR}'", f"{prefix}.initial_active")
        return self


@dataclass
class TrainState:
    phase: str = PRETRAIN
    iteration: int = 0
    active_network: str = None
    last_g_loss: float = math.nan
    last_d_loss: float = math.nan
    streak: int = 0


def update_alternation(state, g_loss, d_loss, config):
    """State after one joint step.

    `g_loss` is the generator's adversarial loss and `d_loss` the
    discriminator loss, both from the step just taken. The active network
    hands over when its own loss is below the threshold, or after
    `livelock_cap` consecutive steps.
    """
    if state.phase != JOINT or state.active_network not in (GENERATOR, DISCRIMINATOR):
        raise InvalidInputError(f"alternation needs the joint phase, got phase '{state.phase}'")
    iteration = state.iteration + 1
    g_loss, d_loss = float(g_loss), float(d_loss)
    if not (math.isfinite(g_loss) and math.isfinite(d_loss)):
        raise DivergenceError(f"non-finite losses g={g_loss} d={d_loss}", iteration)

    active = state.active_network
    loss = g_loss if active == GENERATOR else d_loss
    streak = state.streak + 1
    if loss < config.switch_threshold:
        active, streak = _other(active), 0
    elif streak >= config.livelock_cap:
        runlog.warn(f"iteration {iteration}: {active} stuck for {streak} steps, forcing a switch")
        active, streak = _other(active), 0
    return replace(state, iteration=iteration, active_network=active,
                   last_g_loss=g_loss, last_d_loss=d_loss, streak=streak)


def _other(network):
    return DISCRIMINATOR if network == GENERATOR else GENERATOR


# ---------------------------------------------------------------- data stream

@dataclass
class TrainBatch:
    inputs: torch.Tensor   # (B, 4, H, W) conditioned stacks
    real: torch.Tensor     # (B, 1, H, W)
    masks: torch.Tensor    # (B, 1, H, W)
    weights: torch.Tensor  # (B, 1, H, W) boundary weights
    classes: torch.Tensor  # (B,) conditioning class indices


class PatchStream:
    """Per-iteration seeded batches drawn with replacement from the train patches.

    Malignant patches are reconstructed under their own lesion mask; the
    others get a transplanted donor mask so both classes are conditioned on.
    """

    def __init__(self, patches, seed, sigma=BOUNDARY_SIGMA, reposition=False):
        if not patches:
            raise DataError("no training patches")
        self.patches = list(patches)
        self.seed = int(seed)
        self.sigma = sigma
        self.reposition = reposition
        self.donors = donor_masks_from(self.patches)
        self._weights = OrderedDict()

    def _boundary(self, mask):
        key = hashlib.sha1(mask.pixels.tobytes()).hexdigest()
        if key in self._weights:
            self._weights.move_to_end(key)
            return self._weights[key]
        weight = boundary_weight(mask, sigma=self.sigma).astype(np.float32)
        self._weights[key] = weight
        if len(self._weights) > BOUNDARY_CACHE_SIZE:
            self._weights.popitem(last=False)
        return weight

    def pair(self, iteration, slot):
        pair_seed = derive_seed(self.seed, iteration, slot)
        rng = np.random.default_rng(pair_seed)
        patch = self.patches[int(rng.integers(len(self.patches)))]
        if patch.label == MALIGNANT and not patch.mask.is_empty:
            mask = patch.mask
        else:
            mask = transplant_mask(patch, self.donors, derive_seed(pair_seed, 1), self.reposition)
        conditioned = build_conditioned_input(patch, mask, patch.label, derive_seed(pair_seed, 2))
        return conditioned, patch, mask

    def batch(self, iteration, batch_size):
        pairs = [self.pair(iteration, slot) for slot in range(batch_size)]
        return TrainBatch(
            inputs=torch.from_numpy(np.stack([c.channels for c, _, _ in pairs])),
            real=torch.from_numpy(np.stack([p.image.pixels for _, p, _ in pairs]))[:, None],
            masks=torch.from_numpy(np.stack([m.pixels.astype(np.float32) for _, _, m in pairs]))[:, None],
            weights=torch.from_numpy(np.stack([self._boundary(m) for _, _, m in pairs]))[:, None],
            classes=torch.tensor([class_index(p.label) for _, p, _ in pairs], dtype=torch.long),
        )


# ---------------------------------------------------------------- trainer

def _row(iteration, phase, active, g_loss=math.nan, d_loss=math.nan, feat=math.nan, bound=math.nan, adv=math.nan):
    return {"iteration": iteration, "phase": phase, "active": active, "g_loss": float(g_loss),
            "d_loss": float(d_loss), "feat": float(feat), "bound": float(bound), "adv": float(adv)}


class GanTrainer:
    """Owns both networks, their Adam optimizers and the alternation state."""

    def __init__(self, gen_config=None, disc_config=None, config=None, weights=None,
                 extractor=None, extractor_spec=None, gen_params=None):
        configure_determinism()
        self.gen_config = (gen_config or GeneratorConfig()).validate()
        self.disc_config = (disc_config or DiscriminatorConfig()).validate()
        self.config = (config or GanTrainConfig()).validate()
        self.weights = (weights or LossWeights()).validate()
        self.extractor_spec = extractor_spec or {"kind": "seeded", "seed": 0}
        self.extractor = extractor or make_extractor(self.extractor_spec["kind"], self.extractor_spec["seed"])

        seed = self.config.seed
        self.generator = init_weights(CascadeGenerator(self.gen_config), derive_seed(seed, 0))
        if gen_params is not None:
            self.generator.load_state_dict(gen_params.tensors)
        self.discriminator = init_weights(PatchDiscriminator(self.disc_config), derive_seed(seed, 1))
        self.opt_g = self._adam(self.generator)
        self.opt_d = self._adam(self.discriminator)
        self.state = TrainState()

        self.fingerprint = config_fingerprint(
            "gan-training", self.gen_config, self.disc_config, self.config, self.weights, self.extractor_spec)
        self.generator_fingerprint = config_fingerprint("generator", self.gen_config)

    def _adam(self, module):
        c = self.config
        return torch.optim.Adam(module.parameters(), lr=c.learning_rate, betas=(c.beta1, c.beta2), eps=c.adam_eps)

    def _fake(self, batch):
        return composite_tensor(self.generator(batch.inputs), batch.real, batch.masks)

    def _check(self, value, what):
        if not torch.isfinite(value):
            raise DivergenceError(f"non-finite {what}", self.state.iteration + 1)

    def pretrain_step(self, batch):
        self.opt_g.zero_grad(set_to_none=True)
        feat = feature_loss(self.extractor, batch.real, self._fake(batch))
        loss = self.weights.feature * feat
        self._check(loss, "pretrain loss")
        loss.backward()
        self.opt_g.step()
        self.state = replace(self.state, iteration=self.state.iteration + 1)
        return _row(self.state.iteration, PRETRAIN, GENERATOR, g_loss=loss.item(), feat=feat.item())

    def start_joint(self):
        self.state = replace(self.state, phase=JOINT, active_network=self.config.initial_active, streak=0)
        runlog.log(f"iteration {self.state.iteration}: joint phase, {self.config.initial_active} first", "🔀")

    def _generator_step(self, batch):
        self.discriminator.requires_grad_(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            fake = self._fake(batch)
            d_fake = self.discriminator(fake, batch.classes)
            with torch.no_grad():
                d_real = self.discriminator(batch.real, batch.classes)
            d_loss, adv = adversarial_losses(d_real, d_fake)
            feat = feature_loss(self.extractor, batch.real, fake)
            bound = boundary_loss(batch.real, fake, batch.weights)
            total = total_generator_loss(adv, feat, bound, self.weights)
            self._check(total, "generator loss")
            total.backward()
            self.opt_g.step()
        finally:
            self.discriminator.requires_grad_(True)
        return total, d_loss, feat, bound, adv

    def _discriminator_step(self, batch):
        with torch.no_grad():
            fake = self._fake(batch)
            feat = feature_loss(self.extractor, batch.real, fake)
            bound = boundary_loss(batch.real, fake, batch.weights)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss, adv = adversarial_losses(self.discriminator(batch.real, batch.classes),
                                         self.discriminator(fake, batch.classes))
        self._check(d_loss, "discriminator loss")
        d_loss.backward()
        self.opt_d.step()
        total = total_generator_loss(adv.detach(), feat, bound, self.weights)
        return total, d_loss, feat, bound, adv

    def joint_step(self, batch):
        if self.state.phase != JOINT:
            self.start_joint()
        active = self.state.active_network
        step = self._generator_step if active == GENERATOR else self._discriminator_step
        total, d_loss, feat, bound, adv = step(batch)
        self.state = update_alternation(self.state, adv.item(), d_loss.item(), self.config)
        return _row(self.state.iteration, JOINT, active, total.item(), d_loss.item(),
                    feat.item(), bound.item(), adv.item())

    # ------------------------------------------------------------ checkpoints

    def generator_params(self):
        return network_params(self.generator, self.generator_fingerprint, self.state.iteration)

    def state_params(self):
        params = network_params(self.generator, self.fingerprint, self.state.iteration, prefix=GENERATOR)
        tensors = params.tensors
        tensors.update(network_params(self.discriminator, "", prefix=DISCRIMINATOR).tensors)
        for prefix, optimizer in (("adam_g", self.opt_g), ("adam_d", self.opt_d)):
            for index, slots in optimizer.state_dict()["state"].items():
                for key, value in slots.items():
                    tensors[f"{prefix}/{index}/{key}"] = torch.as_tensor(value).detach().clone()
        s = self.state
        tensors["state/phase"] = torch.tensor(0 if s.phase == PRETRAIN else 1, dtype=torch.int64)
        tensors["state/active"] = torch.tensor(
            {None: -1, GENERATOR: 0, DISCRIMINATOR: 1}[s.active_network], dtype=torch.int64)
        tensors["state/streak"] = torch.tensor(s.streak, dtype=torch.int64)
        if math.isfinite(s.last_g_loss) and math.isfinite(s.last_d_loss):
            tensors["state/last_losses"] = torch.tensor([s.last_g_loss, s.last_d_loss], dtype=torch.float64)
        return params

    def restore(self, params):
        self.generator.load_state_dict(params.subset(GENERATOR))
        self.discriminator.load_state_dict(params.subset(DISCRIMINATOR))
        for prefix, optimizer in (("adam_g", self.opt_g), ("adam_d", self.opt_d)):
            slots = {}
            for name, tensor in params.subset(prefix).items():
                index, key = name.split("/", 1)
                slots.setdefault(int(index), {})[key] = tensor
            state_dict = optimizer.state_dict()
            state_dict["state"] = slots
            optimizer.load_state_dict(state_dict)
        last_g, last_d = math.nan, math.nan
        if "state/last_losses" in params.tensors:
            last_g, last_d = params.tensors["state/last_losses"].tolist()
        self.state = TrainState(
            phase=PRETRAIN if int(params.tensors["state/phase"]) == 0 else JOINT,
            iteration=int(params.iteration),
            active_network={-1: None, 0: GENERATOR, 1: DISCRIMINATOR}[int(params.tensors["state/active"])],
            last_g_loss=last_g,
            last_d_loss=last_d,
            streak=int(params.tensors["state/streak"]),
        )


def pretrain_generator(gen_params, extractor, data_stream, config=None, gen_config=None, weights=None):
    """Run `config.pretrain_iters` feature-loss steps; returns (params', loss history)."""
    config = config or GanTrainConfig()
    if config.pretrain_iters == 0:
        return gen_params, []
    trainer = GanTrainer(gen_config, None, config, weights, extractor=extractor, gen_params=gen_params)
    history = []
    for i in range(config.pretrain_iters):
        row = trainer.pretrain_step(data_stream.batch(i, config.batch_size))
        history.append(row["g_loss"])
    return trainer.generator_params(), history


def alternating_step(trainer, batch):
    """One joint-phase step on the trainer's active network; returns the metrics row."""
    return trainer.joint_step(batch)


# ---------------------------------------------------------------- full run

@dataclass
class GanRun:
    generator: object
    metrics: pd.DataFrame
    checkpoints: list


def write_metrics(rows, path):
    frame = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False)
    return frame


def read_metrics(path, up_to=None):
    if not Path(path).exists():
        raise DataError(f"metrics log {path} is missing")
    frame = pd.read_csv(path, float_precision="round_trip")
    if up_to is not None:
        frame = frame[frame["iteration"] <= up_to]
    return frame.to_dict("records")


def _checkpoint_name(iteration):
    return f"gan_{iteration:07d}.ckpt"


def latest_checkpoint(run_dir):
    found = sorted((Path(run_dir) / "checkpoints").glob("gan_*.ckpt"))
    if not found:
        raise DataError(f"no training checkpoints under {run_dir}/checkpoints")
    return found[-1]


def train_gan(train_patches, run_dir, gen_config=None, disc_config=None, config=None, weights=None,
              extractor_spec=None, sigma=BOUNDARY_SIGMA, resume=None):
    """Pretrain then alternate; writes metrics.csv and checkpoints under `run_dir`."""
    config = (config or GanTrainConfig()).validate()
    present = {p.label for p in train_patches}
    if present != set(CLASSES):
        raise ConfigError(f"train split must contain both classes, found {sorted(present) or 'none'}", "data.patches")

    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    os.makedirs(ckpt_dir, exist_ok=True)
    stream = PatchStream(train_patches, config.seed, sigma=sigma, reposition=config.reposition_donors)
    trainer = GanTrainer(gen_config, disc_config, config, weights, extractor_spec=extractor_spec)

    rows, written = [], []
    if resume is not None:
        params = load_checkpoint(resume, expected_fingerprint=trainer.fingerprint)
        trainer.restore(params)
        rows = read_metrics(run_dir / METRICS_NAME, up_to=trainer.state.iteration)
        runlog.log(f"resumed from {resume} at iteration {trainer.state.iteration}", "⏩")

    total = config.total_iters
    for i in runlog.progress(range(trainer.state.iteration, total), desc="train-gan", unit="it",
                             initial=trainer.state.iteration, total=total):
        batch = stream.batch(i, config.batch_size)
        if i < config.pretrain_iters:
            rows.append(trainer.pretrain_step(batch))
        else:
            rows.append(trainer.joint_step(batch))
        done = trainer.state.iteration
        if done % config.checkpoint_every == 0 or done == total:
            path = ckpt_dir / _checkpoint_name(done)
            save_checkpoint(trainer.state_params(), path)
            write_metrics(rows, run_dir / METRICS_NAME)
            written.append(path)
            runlog.log(f"checkpoint {path} (g={rows[-1]['g_loss']:.4f} d={rows[-1]['d_loss']:.4f})", "💾")

    metrics = write_metrics(rows, run_dir / METRICS_NAME)
    generator = trainer.generator_params()
    save_checkpoint(generator, ckpt_dir / GENERATOR_CHECKPOINT)
    runlog.ok(f"generator checkpoint {ckpt_dir / GENERATOR_CHECKPOINT}")
    return GanRun(generator, metrics, written)
