"""Experiment configuration: one YAML document fully describes a run.

Environment variables may override paths (``RSPROMPT_BACKBONE``,
``RSPROMPT_DATA_ROOT``, ``RSPROMPT_OUTPUT_ROOT``), never hyper-parameters.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data.registry import DATASETS, DatasetDescriptor, LabelMap, register_dataset
from .data.sampling import ALLOWED_SHOTS
from .prompts.state import MethodConfig
from .train import DEFAULT_LR, TrainConfig

ALL_METHODS = ("zeroshot", "probe", "coop", "cocoop", "maple", "promptsrc")
PATH_ENV = {"backbone": "RSPROMPT_BACKBONE", "data_root": "RSPROMPT_DATA_ROOT", "output_root": "RSPROMPT_OUTPUT_ROOT"}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Strict):
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: dict[Literal["coop", "cocoop", "maple", "promptsrc"], float] = Field(default_factory=lambda: dict(DEFAULT_LR))
    warmup_lr: float = Field(1e-5, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)

    @field_validator("lr")
    @classmethod
    def _fill_lr(cls, v):
        for k, rate in v.items():
            if rate <= 0:
                raise ValueError(f"learning rate for {k} must be positive")
        return {**DEFAULT_LR, **v}

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, dict(self.lr), self.warmup_lr, self.momentum, self.weight_decay, seed)


class MethodSection(_Strict):
    n_ctx: int = Field(4, ge=1)
    maple_n_ctx: int = Field(2, ge=1)
    prompt_depth: int = Field(9, ge=1)
    init_template: str | None = "a photo of a"
    maple_init_tokens: Literal["first", "last"] = "last"
    class_token_position: Literal["end"] = "end"
    class_suffix: str = "."
    init_std: float = Field(0.02, gt=0)
    lambda_image: float = Field(10.0, ge=0)
    lambda_text: float = Field(25.0, ge=0)
    kl_weight: float = Field(1.0, ge=0)
    n_templates: int = Field(60, ge=1)
    templates_path: str | None = None
    ensemble: bool = True
    ensemble_mean: float | None = None
    ensemble_std: float | None = Field(None, gt=0)
    meta_net_reduction: int = Field(16, ge=1)
    evaluate_ensembled: bool = True

    def build(self) -> MethodConfig:
        return MethodConfig(**self.model_dump(exclude={"evaluate_ensembled"}))


class ProbeSection(_Strict):
    grid_min_log10: float = -4.0
    grid_max_log10: float = 4.0
    grid_size: int = Field(10, ge=2)
    refine_steps: int = Field(8, ge=0, le=8)
    max_iter: int = Field(1000, ge=1)
    normalize_features: bool = True


class PreprocessSection(_Strict):
    target_size: int | None = None
    interpolation: Literal["bicubic", "bilinear"] = "bicubic"
    crop: Literal["center"] = "center"
    mean: tuple[float, float, float] = (0.48145466, 0.4578275, 0.40821073)
    std: tuple[float, float, float] = (0.26862954, 0.26130258, 0.27577711)


class CustomDataset(_Strict):
    num_images: int = Field(ge=1)
    image_size: int = Field(224, ge=1)
    modality: str = "custom"
    classes: dict[str, str]


class ExperimentConfig(_Strict):
    datasets: list[str]
    methods: list[str] = Field(default_factory=lambda: list(ALL_METHODS))
    shots: list[int] = Field(default_factory=lambda: list(ALLOWED_SHOTS))
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3])
    zeroshot_template: str = "a satellite photo of {}"
    backbone: str = "backbone/vit_b16.safetensors"
    data_root: str = "data"
    output_root: str = "results"
    split_digests: dict[str, dict[str, str]] = Field(default_factory=dict)
    custom_datasets: dict[str, CustomDataset] = Field(default_factory=dict)
    cross_dataset: bool = False
    cross_shots: int = 16
    eval_batch_size: int = Field(64, ge=1)
    train: TrainSection = Field(default_factory=TrainSection)
    method: MethodSection = Field(default_factory=MethodSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    preprocess: PreprocessSection = Field(default_factory=PreprocessSection)

    @field_validator("shots")
    @classmethod
    def _shots(cls, v):
        for k in v:
            if k not in ALLOWED_SHOTS:
                raise ValueError(f"shots={k} not in the allowed set {ALLOWED_SHOTS}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate shot counts")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if len(set(v)) != len(v):
            raise ValueError(f"duplicate seeds in {v}")
        return v

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v if m not in ALL_METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; allowed {ALL_METHODS}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate methods")
        return v

    @field_validator("zeroshot_template")
    @classmethod
    def _template(cls, v):
        if "{}" not in v and "{class}" not in v:
            raise ValueError("template needs a '{}' or '{class}' placeholder")
        return v

    @model_validator(mode="after")
    def _datasets(self):
        if not self.datasets:
            raise ValueError("at least one dataset is required")
        if len(set(self.datasets)) != len(self.datasets):
            raise ValueError("duplicate datasets")
        for d in self.datasets:
            if d not in DATASETS and d not in self.custom_datasets:
                raise ValueError(f"unknown dataset {d!r}")
        if self.cross_shots not in ALLOWED_SHOTS:
            raise ValueError(f"cross_shots must be one of {ALLOWED_SHOTS}")
        return self

    def register_custom(self) -> None:
        from collections import OrderedDict

        for name, c in self.custom_datasets.items():
            desc = DatasetDescriptor(name, name, c.num_images, len(c.classes), c.image_size, c.modality)
            register_dataset(desc, LabelMap(name, OrderedDict(c.classes)))

    def content_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def prompt_methods(self) -> list[str]:
        return [m for m in self.methods if m in ("coop", "cocoop", "maple", "promptsrc")]


def _apply_env(doc: dict) -> dict:
    for key, env in PATH_ENV.items():
        if os.environ.get(env):
            doc[key] = os.environ[env]
    return doc


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load and validate a YAML config; defaults come from the published recipe."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not a well-formed YAML document: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    doc = _apply_env({**doc, **(overrides or {})})
    try:
        cfg = ExperimentConfig(**doc)
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(msgs) from exc
    cfg.register_custom()
    return cfg


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
