"""Declarative run configuration (YAML) with a strict schema.

Unknown keys are errors. Every field has a default except where noted, so a
config file may be as short as ``name: demo``; the fully expanded form is what
gets persisted into each run directory.

Schema::

    name: str                      run name, used as the run-directory stem
    output_dir: str | null         default: $XKD_OUTPUT_ROOT or ./runs
    dataset:
      root: str | null             class-per-folder image root; null means synthetic
      policy: [train, val, test]   percentages for folder datasets
      seed: int                    split seed for folder datasets
      image_size: int | null       resize target (224 for folder data if null)
      synthetic: {image_size, num_classes, blob_radius, noise, counts, seed}
    models:
      teacher: str                 registry name
      student: str                 registry name
      seed: int                    initialization seed
    distill:                       training hyperparameters
      epochs_teacher, epochs_student, batch_size, learning_rate, seed,
      optimizer (adam|sgd), weight_decay,
      loss: {alpha, gamma, temperature, variant (fbce_mse|ce_kl)}
    explain:
      layer: str | null            capture layer; null means the last conv layer
      classes: [int] | null        classes to explain; null means ground truth
      samples: int                 number of evenly spaced test images
      batch_size: int              masked forwards per batch
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import SyntheticSpec
from .engine import DistillConfig
from .losses import LossConfig
from .models import REGISTRY, config_hash

OUTPUT_ROOT_ENV = "XKD_OUTPUT_ROOT"
RESOLVED_NAME = "config.yaml"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticBlock(_Strict):
    image_size: int = Field(32, ge=8)
    num_classes: int = Field(3, ge=2)
    blob_radius: float = Field(6.0, gt=0)
    noise: float = Field(0.1, ge=0)
    counts: tuple[int, int, int] = (100, 20, 30)
    seed: int = 0

    @model_validator(mode="after")
    def _fits(self):
        self.to_spec().validate()
        return self

    def to_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.model_dump())


class DatasetBlock(_Strict):
    root: str | None = None
    policy: tuple[float, float, float] = (65.0, 15.0, 20.0)
    seed: int = 0
    image_size: int | None = None
    synthetic: SyntheticBlock = Field(default_factory=SyntheticBlock)

    @field_validator("root")
    @classmethod
    def _root_exists(cls, v):
        if v is not None and not Path(v).is_dir():
            raise ValueError(f"dataset directory {v!r} does not exist")
        return v

    @model_validator(mode="after")
    def _expand(self):
        if self.image_size is None:
            self.image_size = self.synthetic.image_size if self.root is None else 224
        if self.root is None and self.image_size != self.synthetic.image_size:
            raise ValueError("image_size must equal synthetic.image_size for synthetic data")
        return self


class ModelsBlock(_Strict):
    teacher: str = "toy_teacher"
    student: str = "toy_student"
    seed: int = 0

    @field_validator("teacher", "student")
    @classmethod
    def _registered(cls, v):
        if v not in REGISTRY:
            raise ValueError(f"unknown model {v!r}; registered: {sorted(REGISTRY)}")
        return v


class LossBlock(_Strict):
    alpha: float = Field(0.5, ge=0, le=1)
    gamma: float = Field(2.0, ge=0)
    temperature: float = Field(2.0, gt=0)
    variant: Literal["fbce_mse", "ce_kl"] = "fbce_mse"


class DistillBlock(_Strict):
    loss: LossBlock = Field(default_factory=LossBlock)
    epochs_teacher: int = Field(10, ge=1)
    epochs_student: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    weight_decay: float = Field(0.0, ge=0)

    def to_engine(self) -> DistillConfig:
        d = self.model_dump()
        return DistillConfig(loss=LossConfig(**d.pop("loss")), **d)


class ExplainBlock(_Strict):
    layer: str | None = None
    classes: list[int] | None = None
    samples: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)


class RunConfig(_Strict):
    name: str = "run"
    output_dir: str | None = None
    dataset: DatasetBlock = Field(default_factory=DatasetBlock)
    models: ModelsBlock = Field(default_factory=ModelsBlock)
    distill: DistillBlock = Field(default_factory=DistillBlock)
    explain: ExplainBlock = Field(default_factory=ExplainBlock)

    @model_validator(mode="after")
    def _output(self):
        if self.output_dir is None:
            self.output_dir = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return self

    def run_dir(self, command: str) -> Path:
        return Path(self.output_dir) / self.name / command

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        """Provenance hash; the output location does not affect results, so it is excluded."""
        d = self.resolved()
        d.pop("output_dir")
        return config_hash(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.resolved(), sort_keys=True))
        return path


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{dotted}: parent is not a mapping")
    d[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse ``path`` (YAML), apply dotted-path ``overrides`` (they win) and validate."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        if value is not None:
            set_path(raw, key, value)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format(e)) from None
