"""Run configuration: nested dataclasses, JSON files and ``dot.path=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_classes: int = 8
    seed: int = 0
    n_train: int = 32  # instance seeds per split, shared by all classes
    n_eval: int = 16
    sample_rate: int = 8000
    segment_s: float = 0.5
    clip_s: float = 1.0
    embedding_dim: int = 64
    modality_gap: float = 0.5
    instance_noise: float = 0.05
    normalize_embeddings: bool = False


@dataclass
class SpectralConfig:
    fft_size: int = 512
    hop: int = 128
    window_size: int = 512


@dataclass
class ModelConfig:
    depth: int = 5
    k: int = 8
    widths: list[int] | None = None
    in_channels: int = 2
    leak: float = 0.1


@dataclass
class TrainConfig:
    n_sources: int = 2
    batch_size: int = 8
    total_steps: int = 1500
    lr: float = 1e-3
    warmup_steps: int = 300
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mixup_enabled: bool = True
    modality_subset: list[str] = field(default_factory=lambda: ["audio", "image", "text"])
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    log_every: int = 100

    def validate(self, k: int | None = None) -> None:
        if self.n_sources < 2:
            raise ConfigError(f"n_sources must be >= 2, got {self.n_sources}")
        if k is not None and k < self.n_sources:
            raise ConfigError(f"model k={k} is smaller than n_sources={self.n_sources}")
        for name in ("batch_size", "total_steps", "lr", "clip_norm", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("train.warmup_steps must be non-negative")
        if not self.modality_subset or not set(self.modality_subset) <= {"audio", "image", "text"}:
            raise ConfigError(f"bad modality_subset {self.modality_subset}")


@dataclass
class EvalConfig:
    n_eval: int = 100
    seed: int = 1234
    audio_queries: int = 5  # S, averaged train-split audio embeddings per class
    alpha: float = 0.0
    alpha_grid: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0])
    ood_magnitude: float = 0.5
    composed_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    bootstrap_resamples: int = 1000


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(current, list) or current is None:
        if isinstance(value, str):
            if value.strip().lower() in ("none", "null"):
                return None
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                value = [v.strip() for v in value.split(",") if v.strip()]
        if value is not None and not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _apply(section, values: dict, prefix: str) -> None:
    names = {f.name for f in dataclasses.fields(section)}
    for key, value in values.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {full!r}")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{full}: expected a section")
            _apply(current, value, full + ".")
        else:
            setattr(section, key, _coerce(value, current, full))


def load_config(path: str | Path | None = None, overrides=()) -> Config:
    cfg = Config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _apply(cfg, data, "")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        nested: dict = {}
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
        _apply(cfg, nested, "")
    return cfg
