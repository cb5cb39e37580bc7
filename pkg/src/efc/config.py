"""Experiment configuration: nested dataclasses with a strict JSON schema."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

VARIANTS = ("EFC", "EFM+sym", "FD+sym", "FD+PR-ACE", "finetune")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | csv
    num_classes: int = 20
    input_dim: int = 32
    mean_scale: float = 1.0
    std: float = 2.0
    train_per_class: int = 250
    eval_per_class: int = 50
    seed: int = 0
    train_path: str = ""
    eval_path: str = ""
    has_header: bool = False
    normalize: bool = True


@dataclass
class ScenarioConfig:
    mode: str = "cold"
    steps: int = 5
    warm_fraction: float = 0.5


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 128
    head_init_scale: float = 0.01


@dataclass
class TrainerConfig:
    loss_variant: str = "EFC"
    lambda_efm: float = 10.0
    eta: float = 0.1
    fd_eta: float = 10.0
    lambda_pr: float = 10.0
    sigma: float = 0.2
    proto_update: bool = True
    cov_policy: str = "full"
    epochs_first: int = 100
    epochs_incremental: int = 100
    batch_size: int = 64
    lr_first: float = 1e-4
    lr_first_head: float | None = 3e-3  # None = lr_first
    lr_first_milestones: list[int] = field(default_factory=list)
    lr_incremental: float = 3e-4
    lr_head: float | None = 1e-3  # split rate for the head; None = lr_incremental
    weight_decay: float = 2e-4


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def validate(self) -> "ExperimentConfig":
        t = self.trainer
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if t.loss_variant not in VARIANTS:
            raise ConfigError(f"trainer.loss_variant: must be one of {', '.join(VARIANTS)}")
        for name in ("lambda_efm", "eta", "fd_eta", "lambda_pr", "weight_decay"):
            if getattr(t, name) < 0:
                raise ConfigError(f"trainer.{name}: must be >= 0, got {getattr(t, name)}")
        if t.sigma <= 0:
            raise ConfigError("trainer.sigma: must be > 0")
        if t.batch_size < 1 or t.epochs_first < 0 or t.epochs_incremental < 0:
            raise ConfigError("trainer.batch_size must be >= 1 and epochs >= 0")
        if self.scenario.mode not in ("warm", "cold"):
            raise ConfigError("scenario.mode: must be 'warm' or 'cold'")
        if not 1 <= self.scenario.steps <= self.data.num_classes:
            raise ConfigError("scenario.steps: must be between 1 and data.num_classes")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source: must be 'synthetic' or 'csv'")
        from .prototypes import CovariancePolicy

        try:
            CovariancePolicy.parse(t.cov_policy)
        except ValueError as exc:
            raise ConfigError(f"trainer.cov_policy: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(hint, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {hint}")


def _build(cls, raw: dict, prefix: str = ""):
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}" if prefix else k) for k, v in raw.items()}
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw).validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    raw = config.to_dict()
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        value = text if isinstance(node[parts[-1]], str) else _parse_value(text)
        if isinstance(node[parts[-1]], float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        node[parts[-1]] = value
    return config_from_dict(raw)
