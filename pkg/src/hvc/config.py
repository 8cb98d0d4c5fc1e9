"""Run configuration: one YAML file with a section per module.

Unknown sections or keys are rejected with the dotted key named. The
resolved configuration (file values, then ``--set`` overrides, then flags)
is written next to every run's outputs and can be fed back verbatim.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from .exceptions import ConfigError
from .geometry import CropConfig
from .io import atomic_write_text
from .network import NetConfig
from .propagation import PropagationConfig
from .synthdata import SynthConfig
from .trainer import TrainConfig


@dataclass
class EvalConfig:
    tol_frac: float = 0.008
    last_fraction: float = None


@dataclass
class GradcheckConfig:
    trials: int = 20


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    model: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def to_dict(self):
        return {f.name: _plain(dataclasses.asdict(getattr(self, f.name))) for f in fields(self)}

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path):
        atomic_write_text(path, self.dumps())

    def validate(self):
        try:
            self.crop.validate()
            self.train.validate()
            self.propagation.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(default, value, key):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return value


def _build_section(cls, values, section):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        kwargs[key] = _coerce(getattr(defaults, key), value, f"{section}.{key}")
    return cls(**kwargs)


def from_dict(data):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    sections = {f.name: f.default_factory for f in fields(RunConfig)}
    built = {}
    for name, values in data.items():
        if name not in sections:
            raise ConfigError(f"unknown config key '{name}'")
        built[name] = _build_section(sections[name], values, name)
    return RunConfig(**built).validate()


def parse_override(text):
    """``section.key=value`` with a YAML-typed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: {exc}") from exc
    return parts[0], parts[1], value


def load_config(path=None, overrides=(), seed=None):
    """Read ``path`` (optional), apply ``section.key=value`` overrides, then ``seed`` (training seed)."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    for text in overrides:
        section, key, value = parse_override(text)
        sec = data.setdefault(section, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{section}: expected a mapping")
        sec[key] = value
    if seed is not None:
        data.setdefault("train", {})["seed"] = int(seed)
    return from_dict(data)
