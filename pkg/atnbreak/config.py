#!/usr/bin/env python3
"""
Run configuration

A RunConfig mirrors the JSON document the CLI reads: model, attack, dataset,
train, eval and output sections plus the model init seed. Unknown keys are
rejected at every level with their dotted path; CLI flags override fields
through dotted keys ("attack.epsilon", "seed").
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

from .attack import AttackConfig
from .datasets import DatasetSpec
from .training import TrainConfig
from .utils import ConfigError, fingerprint, get_logger
from .vit import ViTConfig

logger = get_logger(__name__)


def _reject_unknown(cls, data: Mapping, prefix: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"Config section {prefix} must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"Unknown config key: {prefix + '.' if prefix else ''}{key}")


@dataclass(frozen=True)
class OutputPaths:
    checkpoint: str = "out/model.ckpt"
    train_log: str = "out/train.jsonl"
    attack_dir: str = "out/attack"
    report: str = "out/report.json"
    viz_dir: str = "out/viz"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "outputs") -> "OutputPaths":
        _reject_unknown(cls, data, prefix)
        return cls(**dict(data))


@dataclass(frozen=True)
class EvalSettings:
    count: int = 100
    gallery_size: int = 64
    ks: Tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"eval.count must be >= 1, got {self.count}")
        if self.gallery_size < 1:
            raise ConfigError(f"eval.gallery_size must be >= 1, got {self.gallery_size}")
        ks = tuple(int(k) for k in self.ks)
        if not ks or min(ks) < 1:
            raise ConfigError(f"eval.ks must be positive integers, got {self.ks}")
        object.__setattr__(self, "ks", ks)

    def to_dict(self) -> Dict[str, Any]:
        return {"count": self.count, "gallery_size": self.gallery_size, "ks": list(self.ks)}

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "eval") -> "EvalSettings":
        _reject_unknown(cls, data, prefix)
        return cls(**dict(data))


_SECTIONS = {
    "model": ViTConfig,
    "attack": AttackConfig,
    "dataset": DatasetSpec,
    "train": TrainConfig,
    "eval": EvalSettings,
    "outputs": OutputPaths,
}


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    outputs: OutputPaths = field(default_factory=OutputPaths)
    seed: int = 0

    def __post_init__(self):
        if self.model.num_classes is not None and self.model.num_classes != self.dataset.num_classes:
            raise ConfigError(
                f"model.num_classes ({self.model.num_classes}) must equal "
                f"dataset.num_classes ({self.dataset.num_classes})"
            )
        if (self.model.image_size, self.model.channels) != (self.dataset.image_size, self.dataset.channels):
            raise ConfigError("model and dataset disagree on image_size/channels")

    def to_dict(self) -> Dict[str, Any]:
        data = {name: getattr(self, name).to_dict() for name in _SECTIONS}
        data["seed"] = self.seed
        return data

    @property
    def fingerprint(self) -> str:
        return fingerprint({k: v for k, v in self.to_dict().items() if k in ("model", "attack", "dataset")})

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        _reject_unknown(cls, data, prefix="")
        kwargs: Dict[str, Any] = {}
        for name, section in _SECTIONS.items():
            if name in data:
                _reject_unknown(section, data[name], name)
                try:
                    kwargs[name] = section.from_dict(data[name], prefix=name)
                except TypeError as e:
                    raise ConfigError(f"Invalid {name} section: {e}")
        if "seed" in data:
            kwargs["seed"] = _as_int(data["seed"], "seed")
        return cls(**kwargs)


def _as_int(value: Any, key: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {value!r}")


def load_run_config(path=None) -> RunConfig:
    """Defaults when path is None, else the JSON document at path"""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    cfg = RunConfig.from_dict(data)
    logger.debug(f"Loaded run config from {path} (fingerprint {cfg.fingerprint})")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """
    Override fields by dotted key, skipping None values

    Args:
        cfg: Base config
        overrides: e.g. {"attack.epsilon": "8/255", "seed": 3}

    Returns:
        New RunConfig, revalidated
    """
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] != "seed":
                raise ConfigError(f"Unknown config key: {key}")
            data["seed"] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            section, name = parts
            if name not in {f.name for f in fields(_SECTIONS[section])}:
                raise ConfigError(f"Unknown config key: {key}")
            data[section][name] = value
        else:
            raise ConfigError(f"Unknown config key: {key}")
    return RunConfig.from_dict(data)


def write_run_config(path, cfg: RunConfig) -> Path:
    from .persistence import atomic_write_bytes

    body = json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
    return atomic_write_bytes(path, body.encode("utf-8"))
