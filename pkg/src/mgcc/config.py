"""Run configuration: one YAML document with sections {run, data, network,
objective, optim, ldm}.  Every field is defaulted from the owning module's
dataclass, unknown keys are rejected, and validation reports all problems at
once.  parse -> serialize -> parse is idempotent.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import NetworkConfig, PerturbationSpec
from .data import AugmentationConfig
from .errors import ConfigError
from .ldm import DDIMConfig, DenoiserConfig, VAEConfig
from .trainer import OptimConfig


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/run0"


@dataclass
class DataSection:
    dataset_dir: str = "data/toy"
    split_dir: str = ""               # empty -> <dataset_dir>/splits
    split_index: int = 0
    image_size: int = 256
    mask_suffix: str = "_mask"
    train_ratio: float = 0.7
    repeats: int = 3
    labeled_fraction: float = 0.5
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    extra_unlabeled_dirs: tuple = ()
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def resolved_split_dir(self):
        return Path(self.split_dir) if self.split_dir else Path(self.dataset_dir) / "splits"

    def validate(self):
        errs = []
        if not 0.0 < self.train_ratio < 1.0:
            errs.append(f"data.train_ratio must be in (0,1), got {self.train_ratio}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            errs.append(f"data.labeled_fraction must be in (0,1], got {self.labeled_fraction}")
        if self.repeats < 1:
            errs.append(f"data.repeats must be >= 1, got {self.repeats}")
        if self.split_index < 0:
            errs.append(f"data.split_index must be >= 0, got {self.split_index}")
        if self.labeled_per_batch < 1:
            errs.append(f"data.labeled_per_batch must be >= 1, got {self.labeled_per_batch}")
        if self.unlabeled_per_batch < 0:
            errs.append(f"data.unlabeled_per_batch must be >= 0, got {self.unlabeled_per_batch}")
        if self.image_size < 16:
            errs.append(f"data.image_size must be >= 16, got {self.image_size}")
        errs.extend(self.augment.validate())
        return errs


@dataclass
class ObjectiveSection:
    w_max: float = 0.1

    def validate(self):
        return [] if self.w_max > 0 else [f"objective.w_max must be > 0, got {self.w_max}"]


@dataclass
class ScheduleSection:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def validate(self):
        errs = []
        if self.timesteps < 1:
            errs.append(f"ldm.schedule.timesteps must be >= 1, got {self.timesteps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            errs.append("ldm.schedule betas must satisfy 0 < beta_start <= beta_end < 1, "
                        f"got [{self.beta_start}, {self.beta_end}]")
        return errs


@dataclass
class LdmSection:
    vae: VAEConfig = field(default_factory=VAEConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    ddim: DDIMConfig = field(default_factory=DDIMConfig)

    def validate(self):
        errs = []
        errs.extend(f"ldm.vae: {e}" for e in self.vae.validate())
        errs.extend(f"ldm.denoiser: {e}" for e in self.denoiser.validate())
        errs.extend(self.schedule.validate())
        errs.extend(f"ldm: {e}" for e in self.ddim.validate(self.schedule.timesteps))
        return errs


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ldm: LdmSection = field(default_factory=LdmSection)

    def validate(self):
        errs = []
        errs.extend(self.data.validate())
        try:
            self.network.validate()
        except ConfigError as exc:
            errs.append(str(exc))
        errs.extend(self.objective.validate())
        errs.extend(self.optim.validate())
        errs.extend(self.ldm.validate())
        factor = 2 ** len(self.network.encoder_channels)
        if self.data.image_size % factor:
            errs.append(f"data.image_size {self.data.image_size} must be divisible by "
                        f"2^len(encoder_channels) = {factor}")
        if errs:
            raise ConfigError("\n".join(errs))
        return self

    def to_dict(self):
        return _to_plain(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, default, path, errors):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {value!r}")
            return default
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        if isinstance(value, float) and not value.is_integer():
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return default
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list, got {value!r}")
            return default
        return tuple(value)
    return value


def _perturbations_from(value, path, errors):
    if not isinstance(value, (list, tuple)):
        errors.append(f"{path}: expected a list of perturbation specs")
        return []
    specs = []
    known = {f.name for f in dataclasses.fields(PerturbationSpec)}
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            errors.append(f"{path}[{i}]: expected a mapping with a 'kind' key")
            continue
        unknown = sorted(set(item) - known)
        if unknown:
            errors.append(f"{path}[{i}]: unknown keys {unknown}")
        proto = PerturbationSpec(kind=item.get("kind", "f-noise"))
        kwargs = {}
        for name in known & set(item):
            kwargs[name] = _coerce(item[name], getattr(proto, name), f"{path}[{i}].{name}", errors)
        specs.append(dataclasses.replace(proto, **kwargs))
    return specs


def _section_from(cls, data, path, errors):
    proto = cls()
    if data is None:
        return proto
    if not isinstance(data, dict):
        errors.append(f"{path}: expected a mapping")
        return proto
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(data) - names):
        errors.append(f"{path}.{key}: unknown key")
    kwargs = {}
    for name in names & set(data):
        default = getattr(proto, name)
        sub = f"{path}.{name}"
        if dataclasses.is_dataclass(default):
            kwargs[name] = _section_from(type(default), data[name], sub, errors)
        elif name == "perturbations":
            kwargs[name] = _perturbations_from(data[name], sub, errors)
        else:
            kwargs[name] = _coerce(data[name], default, sub, errors)
    return dataclasses.replace(proto, **kwargs)


def from_dict(data):
    """Build a RunConfig from a plain dict, rejecting unknown keys.

    Collects every problem before raising one ConfigError.
    """
    errors = []
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key in sorted(set(data) - set(sections)):
        errors.append(f"{key}: unknown section")
    kwargs = {}
    proto = RunConfig()
    for name in sections:
        if name in data:
            kwargs[name] = _section_from(type(getattr(proto, name)), data[name], name, errors)
    if errors:
        raise ConfigError("\n".join(errors))
    return dataclasses.replace(proto, **kwargs)


def from_yaml(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(data)


def load_config(path, validate=True):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = from_yaml(path.read_text())
    if validate:
        cfg.validate()
    return cfg
