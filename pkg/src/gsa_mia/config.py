"""Experiment configuration: an INI-style ``key = value`` file with section headers.

Every section and key is optional; omitted values take the desk-scale
defaults below. Example::

    [experiment]
    seed = 7
    attack = gsa2

    [target]
    epochs = 2000
    widths = 192, 192
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .defenses import DEFENSE_KINDS
from .features import SAMPLERS

ATTACKS = ("gsa1", "gsa2", "lsa", "threshold")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | cifar10 | raw
    path: str = ""
    count: int = 2000
    side: int = 8
    classes: int = 10
    channels: int = 1


@dataclass
class ScheduleSpec:
    kind: str = "linear"
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplerSpec:
    method: str = "equidistant"
    k: int = 10
    stride: int = 20


@dataclass
class ModelTrainSpec:
    epochs: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    widths: tuple = (192, 192)
    embed_dim: int = 32


@dataclass
class ShadowSpec(ModelTrainSpec):
    count: int = 2
    train_size: int = 500
    mirror_defense: bool = True  # shadows trained with the target's defense


@dataclass
class DefenseSpec:
    kind: str = "none"
    clip_bound: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    attack: str = "gsa2"
    classifier: str = "logistic"
    layer_fraction: float = 1.0
    repeats: int = 1
    squared_norm: bool = True
    members: int = 500
    nonmembers: int = 500
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    target: ModelTrainSpec = field(default_factory=ModelTrainSpec)
    shadow: ShadowSpec = field(default_factory=ShadowSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.seed >= 0, "seed must be a non-negative integer")
        need(self.attack in ATTACKS, f"attack must be one of {ATTACKS}")
        need(self.classifier in ("logistic", "mlp"), "classifier must be logistic or mlp")
        need(0 < self.layer_fraction <= 1, "layer_fraction must lie in (0, 1]")
        need(self.repeats >= 1, "repeats must be >= 1")
        need(self.members >= 2 and self.members == self.nonmembers,
             "members and nonmembers must be equal and >= 2 (balanced evaluation)")
        d = self.dataset
        need(d.source in ("synthetic", "cifar10", "raw"), "dataset.source must be synthetic, cifar10 or raw")
        need(d.source == "synthetic" or d.path, "dataset.path is required for cifar10/raw sources")
        need(d.source != "synthetic" or d.side in (8, 16, 32), "dataset.side must be 8, 16 or 32")
        need(self.schedule.kind in ("linear", "cosine"), "schedule.kind must be linear or cosine")
        need(self.schedule.T >= 1, "schedule.T must be >= 1")
        need(self.sampler.method in SAMPLERS, f"sampler.method must be one of {SAMPLERS}")
        need(1 <= self.sampler.k <= self.schedule.T, "sampler.k must lie in [1, T]")
        need(self.sampler.stride >= 1, "sampler.stride must be >= 1")
        for name, m in (("target", self.target), ("shadow", self.shadow)):
            need(m.epochs >= 1 and m.batch_size >= 1, f"{name}.epochs and batch_size must be >= 1")
            need(m.learning_rate >= 0, f"{name}.learning_rate must be >= 0")
            need(m.lr_schedule in ("constant", "cosine"), f"{name}.lr_schedule must be constant or cosine")
            need(len(m.widths) >= 1 and all(w >= 1 for w in m.widths), f"{name}.widths must be positive")
            need(m.embed_dim >= 2 and m.embed_dim % 2 == 0, f"{name}.embed_dim must be even")
        need(self.shadow.count >= 1 and self.shadow.train_size >= 2, "shadow.count >= 1 and train_size >= 2")
        need(self.defense.kind in DEFENSE_KINDS, f"defense.kind must be one of {DEFENSE_KINDS}")
        if d.source == "synthetic":
            need(d.count >= self.members + self.nonmembers + 2 * self.shadow.train_size,
                 "dataset.count too small for target split plus shadow pool")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that influences results (``out_dir`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"sampler.k": 1})``."""
        new = copy.deepcopy(self)
        for key, value in changes.items():
            obj = new
            *path, last = key.split(".")
            for p in path:
                obj = getattr(obj, p)
            if not hasattr(obj, last):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(obj, last, _coerce(type(getattr(obj, last)), value, key))
        return new


_SECTIONS = {"dataset": DatasetSpec, "schedule": ScheduleSpec, "sampler": SamplerSpec,
             "target": ModelTrainSpec, "shadow": ShadowSpec, "defense": DefenseSpec}


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep "T" distinct from "t"
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    top = {f.name: f for f in fields(ExperimentConfig) if f.name not in _SECTIONS}
    for section in cp.sections():
        if section == "experiment":
            for key, raw in cp[section].items():
                if key not in top:
                    raise ConfigError(f"unknown key experiment.{key}")
                setattr(cfg, key, _coerce(type(getattr(cfg, key)), raw, f"experiment.{key}"))
        elif section in _SECTIONS:
            sub = getattr(cfg, section)
            names = {f.name for f in fields(sub)}
            for key, raw in cp[section].items():
                if key not in names:
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(sub, key, _coerce(type(getattr(sub, key)), raw, f"{section}.{key}"))
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = ["[experiment]"]
    for k, v in d.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_fmt(v)}")
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
