"""Run configuration: one YAML file with data/model/loss/train/eval sections."""

from __future__ import annotations

import dataclasses
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import yaml

from .model import ModelConfig
from .objective import LossConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_subjects: int = 20
    seed: int = 0
    split_fraction: float = 0.8
    image_size: int = 64


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    n_samples: int = 100
    thresholds: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name == "full":
            return cls()
        if name == "desk":
            return cls(model=ModelConfig.desk(), train=TrainConfig.desk())
        raise ConfigError(f"unknown preset {name!r} (choose 'full' or 'desk')")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            d = section.to_dict() if hasattr(section, "to_dict") else dataclasses.asdict(section)
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig, "train": TrainConfig, "eval": EvalConfig}
_TUPLE_FIELDS = {"spatiotemporal_scales", "temporal_scales", "encoder_channel_widths", "class_weights", "thresholds"}


def _merge(base: RunConfig, overrides: dict) -> RunConfig:
    sections = {}
    for name, values in overrides.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        cls = _SECTIONS[name]
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
        current = base.to_dict()[name]
        current.update(values)
        current = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in current.items()}
        try:
            sections[name] = cls(**current)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} config: {exc}") from exc
    return dataclasses.replace(base, **sections)


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def parse_overrides(pairs: tuple[str, ...]) -> dict:
    """Turn ``section.key=value`` strings into a nested override mapping."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        dotted, value = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        out.setdefault(section, {})[key] = _parse_value(value)
    return out


def load_config(path: Optional[Path] = None, preset: str = "desk", overrides: tuple[str, ...] = ()) -> RunConfig:
    cfg = RunConfig.preset(preset)
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = dict(raw)
        preset_name = raw.pop("preset", None)
        if preset_name is not None:
            cfg = RunConfig.preset(preset_name)
        cfg = _merge(cfg, raw)
    if overrides:
        cfg = _merge(cfg, parse_overrides(overrides))
    return cfg


def save_config(cfg: RunConfig, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def environment_info() -> dict:
    from . import __version__

    return {
        "growthnp": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "platform": platform.platform(),
    }
