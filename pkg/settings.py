"""
Experiment configuration: one TOML file, one table per pipeline stage

Missing tables and keys take the module defaults; unknown keys and wrong
types are reported with their dotted path (e.g. `gan_train.batch_size`).
"""

import json
import os
import shutil
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from augmentor import SynthesisConfig
from classifier_harness import AugmentationPolicy, ClassifierConfig, CurriculumSchedule
from errors import ConfigError
from gan_models import DiscriminatorConfig, GeneratorConfig
from gan_trainer import GanTrainConfig
from losses import LossConfig
from patch_pipeline import PipelineConfig

SNAPSHOT_NAME = "config.snapshot"
RUN_INFO_NAME = "run.json"


@dataclass
class DataConfig:
    patches: str = "work/patches"
    synthetic: str = "work/synthetic"
    gan_run: str = "work/gan"

    def validate(self, prefix="data"):
        for name in ("patches", "synthetic", "gan_run"):
            if not getattr(self, name):
                raise ConfigError("must not be empty", f"{prefix}.{name}")
        return self


@dataclass
class EvaluateConfig:
    runs: dict = field(default_factory=dict)
    sample_rows: int = 2

    def validate(self, prefix="evaluate"):
        for scheme, run_dir in self.runs.items():
            if not isinstance(run_dir, str):
                raise ConfigError("run directories must be strings", f"{prefix}.runs.{scheme}")
        if self.sample_rows < 0:
            raise ConfigError("must be >= 0", f"{prefix}.sample_rows")
        return self


SECTIONS = {
    "data": DataConfig,
    "pipeline": PipelineConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "losses": LossConfig,
    "gan_train": GanTrainConfig,
    "synthesis": SynthesisConfig,
    "classifier": ClassifierConfig,
    "curriculum": CurriculumSchedule,
    "augmentation": AugmentationPolicy,
    "evaluate": EvaluateConfig,
}


@dataclass
class Experiment:
    data: DataConfig
    pipeline: PipelineConfig
    generator: GeneratorConfig
    discriminator: DiscriminatorConfig
    losses: LossConfig
    gan_train: GanTrainConfig
    synthesis: SynthesisConfig
    classifier: ClassifierConfig
    curriculum: CurriculumSchedule
    augmentation: AugmentationPolicy
    evaluate: EvaluateConfig
    source: Path = None


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, path):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, tuple):
        if isinstance(value, list):
            sample = default[0] if default else None
            return tuple(_coerce(v, sample, f"{path}[{i}]") if sample is not None else v
                         for i, v in enumerate(value))
    elif isinstance(default, dict):
        if isinstance(value, dict):
            return value
    elif isinstance(default, str) or default is None:
        if isinstance(value, str):
            return value
    expected = type(default).__name__ if default is not None else "str"
    raise ConfigError(f"expected {expected}, got {type(value).__name__} {value!r}", path)


def build_section(name, table):
    """Config dataclass for one TOML table, validated."""
    cls = SECTIONS[name]
    if not isinstance(table, dict):
        raise ConfigError("must be a table", name)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", f"{name}.{key}")
        kwargs[key] = _coerce(value, _default(known[key]), f"{name}.{key}")
    return cls(**kwargs).validate(name)


def parse_experiment(document, source=None):
    unknown = set(document) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section (expected one of {sorted(SECTIONS)})", sorted(unknown)[0])
    sections = {name: build_section(name, document.get(name, {})) for name in SECTIONS}
    experiment = Experiment(**sections, source=Path(source) if source else None)
    gen, disc = experiment.generator, experiment.discriminator
    if disc.input_resolution != gen.final_resolution:
        raise ConfigError(
            f"{disc.input_resolution} differs from generator.final_resolution {gen.final_resolution}",
            "discriminator.input_resolution")
    return experiment


def load_experiment(path):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    return parse_experiment(document, path)


def write_run_info(run_dir, experiment, command, seed, **extra):
    """Snapshot the config file byte for byte and record how the run was started.

    run.json also carries the resolved tables, so runs started from defaults
    and command-line overrides can be repeated without the original file.
    """
    run_dir = Path(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    if experiment.source is not None:
        shutil.copyfile(experiment.source, run_dir / SNAPSHOT_NAME)
    resolved = {name: asdict(getattr(experiment, name)) for name in SECTIONS}
    info = {"command": command, "seed": seed, "config": str(experiment.source or ""), "resolved": resolved, **extra}
    with open(run_dir / RUN_INFO_NAME, "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")
    return run_dir / RUN_INFO_NAME


def describe(experiment, *names):
    """(key, value) rows for a stage banner."""
    rows = []
    for name in names:
        for key, value in asdict(getattr(experiment, name)).items():
            rows.append((f"{name}.{key}", value))
    return rows
