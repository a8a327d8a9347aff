"""Versioned experiment configuration.

Configs are JSON objects whose sections map one-to-one onto the dataclasses
below.  Unknown keys anywhere are rejected so a typo cannot silently fall
back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .errors import ValidationError

CONFIG_VERSION = 1


@dataclass
class DatasetConfig:
    path: Optional[str] = None
    column: object = 0
    synthetic: str = "electricity"
    length: Optional[int] = None
    scaler: str = "standard"
    split: List[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    max_train_windows: Optional[int] = 5000


@dataclass
class ModelSection:
    lookback: int = 84
    horizon: int = 12
    width: int = 8
    encoder_layers: int = 2
    encoder_order: int = 4
    decoder_order: int = 4
    mlp: bool = True


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    patience: Optional[int] = 10


@dataclass
class DetectorConfig:
    kind: str = "norm"
    alpha: Optional[float] = 2.5 / 8760
    threshold: Optional[float] = None
    mode: str = "horizon"
    ae_epochs: int = 20
    ae_max_windows: int = 5000


@dataclass
class AttackSection:
    method: str = "pgd"
    step_size: float = 1e-2
    max_iters: int = 100
    mode: str = "detector"
    clip: Optional[float] = None
    budget: Optional[float] = None
    n_windows: int = 50
    beta: Optional[float] = 0.9907
    slack: Optional[float] = None


@dataclass
class FinetuneConfig:
    batch: int = 256
    iters: int = 10
    lr: float = 1e-3
    steps_per_iter: int = 4


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self) -> "ExperimentConfig":
        if self.version != CONFIG_VERSION:
            raise ValidationError(f"unsupported config version {self.version!r} (expected {CONFIG_VERSION})")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if self.dataset.synthetic not in ("electricity", "noisy_sine", "noiseless_ar3", "ar3"):
            raise ValidationError(f"unknown synthetic dataset {self.dataset.synthetic!r}")
        if len(self.dataset.split) != 3 or abs(sum(self.dataset.split) - 1) > 1e-9:
            raise ValidationError("dataset.split must be three fractions summing to 1")
        if self.optimizer.kind != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer.kind!r}")
        if self.optimizer.lr <= 0 or self.optimizer.epochs < 0 or self.optimizer.batch_size < 1:
            raise ValidationError("optimizer lr must be > 0, epochs >= 0, batch_size >= 1")
        if self.detector.kind not in ("norm", "autoencoder"):
            raise ValidationError(f"unknown detector kind {self.detector.kind!r}")
        if self.detector.threshold is None and self.detector.alpha is None:
            raise ValidationError("detector needs alpha or an explicit threshold")
        if self.detector.alpha is not None and not 0 < self.detector.alpha < 1:
            raise ValidationError("detector.alpha must lie in (0, 1)")
        if self.attack.method not in ("pgd", "dda"):
            raise ValidationError(f"unknown attack method {self.attack.method!r}")
        if self.attack.n_windows < 1:
            raise ValidationError("attack.n_windows must be >= 1")
        for name in ("lookback", "horizon", "width", "encoder_order", "decoder_order"):
            if getattr(self.model, name) < 1:
                raise ValidationError(f"model.{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValidationError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValidationError(f"unknown field(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, data, "").validate()
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)
