"""Experiment configuration: strict dataclasses round-tripped through TOML."""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomlkit

from .losses import GAN_MODES, LossWeights
from .models import DiscriminatorSpec, GeneratorSpec, SegmenterSpec


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # constant for the first half of the epochs, then linear decay to zero
    schedule: str = "linear-half"


@dataclass
class SegPretrainConfig:
    epochs: int = 50
    class_weights: tuple[float, float] = (0.143, 0.857)
    batch_size: int = 4
    learning_rate: float = 1e-3
    patience: int = 5
    min_epochs: int = 10  # early stopping is disarmed before this
    val_fraction: float = 0.2

    def __post_init__(self):
        if any(w <= 0 for w in self.class_weights) or not math.isclose(sum(self.class_weights), 1.0, abs_tol=1e-9):
            raise ConfigError("seg_pretrain.class_weights must be positive and sum to 1")


@dataclass
class HistoryBufferConfig:
    enabled: bool = False
    capacity: int = 50


@dataclass
class DataConfig:
    manifest: str = ""
    root: str = ""  # defaults to the manifest's directory
    segmenter: str = ""  # pretrained segmenter path stem; defaults to <run_dir>/segmenter
    class_names: tuple[str, str] = ("background", "ship")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    gan_mode: str = "lsgan"
    steps_per_epoch: int = 0  # 0: one pass over the larger domain
    panel_every: int = 10
    run_dir: str = "runs/default"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seg_pretrain: SegPretrainConfig = field(default_factory=SegPretrainConfig)
    history_buffer: HistoryBufferConfig = field(default_factory=HistoryBufferConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    segmenter: SegmenterSpec = field(default_factory=SegmenterSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.gan_mode not in GAN_MODES:
            raise ConfigError(f"gan_mode must be one of {GAN_MODES}")


def _from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("unknown config key: " + ", ".join(prefix + k for k in unknown))
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _from_dict(hint, value, f"{prefix}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = _to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def config_from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, data)


def config_to_dict(config: TrainConfig) -> dict:
    return _to_dict(config)


def _coerce(value: str) -> Any:
    try:
        return tomlkit.parse(f"v = {value}")["v"].unwrap()
    except Exception:
        return value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides; values are parsed as TOML literals when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _coerce(raw.strip())
    return data


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    try:
        data = tomlkit.parse(Path(path).read_text()).unwrap()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomlkit.exceptions.ParseError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides or []))


def dumps_config(config: TrainConfig) -> str:
    return tomlkit.dumps(config_to_dict(config))


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(config))


PRESET_DIR = Path(__file__).parent / "presets"


def preset_path(name: str) -> Path:
    path = PRESET_DIR / f"{name}.toml"
    if not path.exists():
        choices = ", ".join(sorted(p.stem for p in PRESET_DIR.glob("*.toml")))
        raise ConfigError(f"unknown preset {name!r} (available: {choices})")
    return path
