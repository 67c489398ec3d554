"""Experiment configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected so that a typo never silently falls back to a
default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .trainer import TrainConfig

REWARDS = ("FREQUENCY", "CORRECTNESS", "SFT")
OUTPUT_ROOT_ENV = "GAPOLAB_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class PolicyConfig:
    backend: str = "mlp"
    d_e: int = 16
    d_h: int = 32
    init_scale: float = 0.05

    def validate(self):
        if self.backend not in ("mlp", "tabular"):
            raise ValueError(f"backend must be 'mlp' or 'tabular' (got {self.backend!r})")
        if self.d_e < 1 or self.d_h < 1:
            raise ValueError("d_e and d_h must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")


@dataclass
class DataConfig:
    categories: list[str] | None = None  # None: all built-in categories
    heldout_ratio: float = 0.75  # fraction of categories used for training
    count: int = 512
    min_len: int = 8
    max_len: int = 8
    open_fraction: float = 0.0

    def validate(self):
        if not 0 < self.heldout_ratio < 1:
            raise ValueError("heldout_ratio must lie in (0, 1)")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.open_fraction <= 1:
            raise ValueError("open_fraction must lie in [0, 1]")


@dataclass
class BaseConfig:
    """Format-following, positionally biased starting policy."""

    steps: int = 200
    position_decay: float = 0.35
    learning_rate: float = 1e-2
    batch_size: int = 8

    def validate(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 < self.position_decay <= 1:
            raise ValueError("position_decay must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class EvalConfig:
    every: int = 0  # steps between trajectory evaluations; 0 = only at the end
    list_prompts: int = 10
    list_samples: int = 100
    open_prompts: int = 4
    open_samples: int = 500
    creative_samples: int = 50

    def validate(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < (0 if f.name == "every" else 1):
                raise ValueError(f"{f.name} must be positive")


@dataclass
class ExperimentConfig:
    seed: int = 0
    reward: str = "FREQUENCY"
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    sft_learning_rate: float = 1e-2
    reward_trace: bool = False
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    dataset: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.reward not in REWARDS:
            raise ConfigError(f"reward: must be one of {REWARDS} (got {self.reward!r})")
        if self.sft_learning_rate <= 0:
            raise ConfigError("sft_learning_rate: must be > 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every: must be >= 0")
        for name in ("policy", "dataset", "base", "train", "eval"):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"{name}.{e}") from None
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / self.output_dir if root else Path(self.output_dir)


_NESTED = {"policy": PolicyConfig, "dataset": DataConfig, "base": BaseConfig,
           "train": TrainConfig, "eval": EvalConfig}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs: dict[str, Any] = {}
    for k, v in data.items():
        if path == "" and k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v or {}, k)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{path}.{e}") from None


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    cfg.validate()
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return from_dict(data or {})


def schema() -> dict:
    """Key -> default for every accepted key (nested sections as sub-dicts)."""
    return ExperimentConfig().to_dict()
