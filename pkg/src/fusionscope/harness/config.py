"""Experiment configuration (TOML) with strict schema validation."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..backbones import BackboneConfig, tiny_config
from ..dataio import AugmentConfig
from ..model import ModelConfig
from ..training import BranchWeights, TrainConfig

OUT_ENV = "FUSIONSCOPE_OUT"


class ConfigError(ValueError):
    """Configuration file missing, unparsable or violating the schema."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    name: str = "dataset"
    manifest: str
    image_size: int = Field(224, ge=32)
    class_names: list[str] = ["class_0", "class_1"]

    @field_validator("class_names")
    @classmethod
    def _two_classes(cls, v):
        if len(v) != 2:
            raise ValueError("exactly two class names are required")
        return v


class FoldsSection(_Strict):
    k: int = Field(5, ge=2)
    seed: int = 0
    only: Optional[list[int]] = None


class BackboneSection(_Strict):
    kind: Literal["GLOBAL_RESNET_STYLE", "LOCAL_BAGNET_STYLE"]
    preset: Literal["reference", "tiny"] = "reference"
    stage_channels: Optional[list[int]] = None
    blocks_per_stage: Optional[list[int]] = None
    stem_channels: Optional[int] = None
    strides: Optional[list[int]] = None
    local_receptive_field: Optional[int] = None
    pretrained_weights: Optional[str] = None

    def build(self) -> BackboneConfig:
        overrides = {k: v for k, v in self.model_dump().items()
                     if k not in ("kind", "preset") and v is not None}
        if self.preset == "tiny":
            return tiny_config(self.kind, **overrides)
        return BackboneConfig(kind=self.kind, **overrides)


class BackbonesSection(_Strict):
    global_: BackboneSection = Field(BackboneSection(kind="GLOBAL_RESNET_STYLE"), alias="global")
    local: BackboneSection = BackboneSection(kind="LOCAL_BAGNET_STYLE")


class FusionSection(_Strict):
    strategy: Literal["gate", "concat", "product"] = "gate"
    fuse_channels: int = Field(64, ge=1)
    inter_channels: Optional[int] = Field(None, ge=1)
    gate_norm: Literal["SIGMOID", "SOFTMAX"] = "SIGMOID"


class WeightsSection(_Strict):
    w_g: float = 0.3
    w_l: float = 0.3
    w_f: float = 0.4


class TrainSection(_Strict):
    preset: Literal["busi", "distal_myopathy"] = "busi"
    lr_g: Optional[float] = Field(None, gt=0)
    lr_l: Optional[float] = Field(None, gt=0)
    lr_f: Optional[float] = Field(None, gt=0)
    wd_g: Optional[float] = Field(None, ge=0)
    wd_l: Optional[float] = Field(None, ge=0)
    wd_f: Optional[float] = Field(None, ge=0)
    dropout_fusion: Optional[float] = Field(None, ge=0, lt=1)
    momentum: Optional[float] = Field(None, ge=0)
    batch_size: Optional[int] = Field(None, ge=2)
    max_epochs: Optional[int] = Field(None, ge=1)
    patience: Optional[int] = Field(None, ge=1)
    lr_step: Optional[int] = Field(None, ge=1)
    lr_gamma: Optional[float] = Field(None, gt=0)
    weights: WeightsSection = WeightsSection()

    def build(self, seed: int) -> TrainConfig:
        overrides = {k: v for k, v in self.model_dump().items()
                     if k not in ("preset", "weights") and v is not None}
        overrides["weights"] = BranchWeights(**self.weights.model_dump())
        overrides["seed"] = seed
        factory = TrainConfig.busi if self.preset == "busi" else TrainConfig.distal_myopathy
        return factory(**overrides)


class AugmentSection(_Strict):
    flip: bool = True
    rotate: bool = True
    jitter: bool = True
    flip_p: float = Field(0.5, ge=0, le=1)
    max_rotation: float = Field(10.0, ge=0)
    max_jitter: float = Field(0.1, ge=0, lt=1)


class SaliencySection(_Strict):
    reduction: Literal["MEAN_ABS", "L2"] = "MEAN_ABS"
    overlay_alpha: float = Field(0.5, ge=0, le=1)
    # "receptive_field" anchors grid cells on their receptive-field centres,
    # "half_pixel" treats the grid as a plain image resize
    upsample: Literal["receptive_field", "half_pixel"] = "receptive_field"


class MetricsSection(_Strict):
    steps: int = Field(10, ge=1)
    blur_kernel: int = Field(21, ge=1)
    blur_sigma: float = Field(5.0, gt=0)
    tie_policy: Literal["EXPECTED", "STABLE"] = "EXPECTED"
    alpha: float = Field(1.0, ge=0, le=1)
    seed: int = 0

    @field_validator("blur_kernel")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("blur_kernel must be odd")
        return v


class ExperimentConfig(_Strict):
    dataset: DatasetSection
    folds: FoldsSection = FoldsSection()
    backbones: BackbonesSection = BackbonesSection()
    fusion: FusionSection = FusionSection()
    train: TrainSection = TrainSection()
    augment: AugmentSection = AugmentSection()
    saliency: SaliencySection = SaliencySection()
    metrics: MetricsSection = MetricsSection()
    output_dir: str = "runs/experiment"
    seed: int = 0

    # set by load_config; not part of the file schema
    source_dir: Optional[str] = Field(None, exclude=True)

    @model_validator(mode="after")
    def _buildable(self):
        try:
            self.model_config_obj()
        except (ValueError, TypeError) as exc:
            raise ValueError(f"backbones/fusion: {exc}") from exc
        return self

    def model_config_obj(self) -> ModelConfig:
        return ModelConfig(
            global_backbone=self.backbones.global_.build(),
            local_backbone=self.backbones.local.build(),
            strategy=self.fusion.strategy,
            fuse_channels=self.fusion.fuse_channels,
            inter_channels=self.fusion.inter_channels,
            gate_norm=self.fusion.gate_norm,
            dropout=self.train_config().dropout_fusion,
            input_size=self.dataset.image_size,
        )

    def train_config(self) -> TrainConfig:
        return self.train.build(self.seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.augment.model_dump())

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.source_dir:
            path = Path(self.source_dir) / path
        return path

    @property
    def manifest_path(self) -> Path:
        return self._resolve(self.dataset.manifest)

    @property
    def output_path(self) -> Path:
        env = os.environ.get(OUT_ENV)
        if env:
            return Path(env)
        return self._resolve(self.output_dir)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, source_dir: Optional[str | Path] = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None
    cfg.source_dir = str(source_dir) if source_dir is not None else None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: malformed TOML: {exc}") from None
    return parse_config(data, path.parent)
