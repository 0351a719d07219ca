"""Configuration dataclasses, presets, and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


CONVNEXT_TINY_DEPTHS = (3, 3, 9, 3)
CONVNEXT_TINY_WIDTHS = (96, 192, 384, 768)


@dataclass
class BackboneSpec:
    kind: str = "toy"
    stage_depths: tuple = (1, 1, 1)
    stage_widths: tuple = (16, 32, 64)
    input_resolution: int = 64
    weights: Optional[str] = None
    freeze: bool = False

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)

    @property
    def stride(self) -> int:
        if self.kind == "convnext_tiny":
            return 32
        return 2 ** len(self.stage_widths)

    @property
    def out_channels(self) -> int:
        return self.stage_widths[-1]

    def validate(self) -> None:
        if self.kind not in ("convnext_tiny", "toy"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "convnext_tiny":
            if self.stage_depths != CONVNEXT_TINY_DEPTHS or self.stage_widths != CONVNEXT_TINY_WIDTHS:
                raise ConfigError(
                    "convnext_tiny fixes depths (3, 3, 9, 3) and widths (96, 192, 384, 768)"
                )
        else:
            if len(self.stage_widths) != len(self.stage_depths) or not self.stage_widths:
                raise ConfigError("toy backbone needs one depth per stage width")
            if self.stride < 8:
                raise ConfigError("toy backbone must reach a final stride of at least 8")
            if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
                raise ConfigError("stage depths and widths must be positive")
        if self.input_resolution < self.stride or self.input_resolution % self.stride:
            raise ConfigError(
                f"input resolution {self.input_resolution} is not a multiple of stride {self.stride}"
            )

    @classmethod
    def convnext_tiny(cls, input_resolution: int = 384) -> "BackboneSpec":
        return cls("convnext_tiny", CONVNEXT_TINY_DEPTHS, CONVNEXT_TINY_WIDTHS, input_resolution)


@dataclass
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    num_classes: int = 8
    deg_dilations: tuple = (1, 2, 3)
    dec_dilations: tuple = (1, 2, 3)
    # grouped 3x3 convs in the DEC paths; 1 disables grouping
    dec_groups: int = 4
    dropout: float = 0.1
    omega_init: float = 1.0
    # C' of the alignment branch; None means half the backbone width
    cea_channels: Optional[int] = None
    cea_temperature: float = 1.0
    learnable_cea_temperature: bool = False
    cea_in_descriptor: bool = False

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        self.deg_dilations = tuple(int(d) for d in self.deg_dilations)
        self.dec_dilations = tuple(int(d) for d in self.dec_dilations)

    @property
    def channels(self) -> int:
        return self.backbone.out_channels

    @property
    def resolved_cea_channels(self) -> int:
        return self.cea_channels if self.cea_channels is not None else self.channels // 2

    def validate(self) -> None:
        self.backbone.validate()
        c = self.channels
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if c % 4:
            raise ConfigError(f"backbone width {c} is not divisible by 4")
        for name, rates in (("deg_dilations", self.deg_dilations), ("dec_dilations", self.dec_dilations)):
            if len(rates) != 3 or any(r not in (1, 2, 3) for r in rates):
                raise ConfigError(f"{name} must be three rates drawn from {{1, 2, 3}}, got {rates}")
        if self.dec_groups < 1 or c % self.dec_groups or (c // 4) % self.dec_groups:
            raise ConfigError(f"dec_groups={self.dec_groups} must divide {c} and {c // 4}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        cp = self.resolved_cea_channels
        if cp < 1 or (c + cp) % 2:
            raise ConfigError(f"C + C' must be even (C={c}, C'={cp})")
        if not self.cea_temperature > 0:
            raise ConfigError("CEA temperature must be positive")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_cda: float = 1.0
    lambda_infonce: float = 1.0
    lambda_ce: float = 1.0
    tau_init: float = 0.07
    learnable_tau: bool = True
    smoothing: float = 0.1
    ce_smoothing: float = 0.0
    mse_mode: str = "mse_plain"

    def validate(self) -> None:
        import math

        if not self.tau_init > 0:
            raise ConfigError("tau must be positive")
        for s in (self.smoothing, self.ce_smoothing):
            if not 0.0 <= s < 1.0:
                raise ConfigError("label smoothing must lie in [0, 1)")
        for v in (self.alpha, self.beta, self.lambda_cda, self.lambda_infonce, self.lambda_ce):
            if not math.isfinite(v):
                raise ConfigError("loss weights must be finite")
        if self.mse_mode not in ("mse_plain", "one_minus_mse"):
            raise ConfigError(f"unknown mse_mode {self.mse_mode!r}")


@dataclass
class AugmentPolicy:
    crop: bool = True
    hflip: bool = True
    rotate: bool = True
    crop_scale: tuple = (0.8, 1.0)
    max_rotation: float = 10.0

    def __post_init__(self):
        self.crop_scale = tuple(float(s) for s in self.crop_scale)

    @property
    def is_identity(self) -> bool:
        return not (self.crop or self.hflip or self.rotate)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(crop=False, hflip=False, rotate=False)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: str = "cosine"
    steps: int = 200
    batch_classes: int = 8
    seed: int = 0
    dtype: str = "float32"
    eval_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.batch_classes < 2:
            raise ConfigError("batch_classes must be at least 2 (InfoNCE needs negatives)")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_dict(data or {})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_overrides(config: TrainConfig, overrides) -> TrainConfig:
    """Return a new config with ``key=value`` dotted overrides applied.

    Values are parsed as YAML scalars, so ``model.deg_dilations=[1,1,2]``
    and ``loss.learnable_tau=false`` both work.
    """
    data = config.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return TrainConfig.from_dict(data)


def preset(name: str) -> TrainConfig:
    """Named starting points: ``full`` (ConvNeXt-Tiny at 384, 701 classes) and ``toy``."""
    if name == "full":
        return TrainConfig(
            model=ModelConfig(backbone=BackboneSpec.convnext_tiny(384), num_classes=701, dec_groups=16),
            batch_classes=32,
        )
    if name == "toy":
        return TrainConfig(model=ModelConfig(), batch_classes=8)
    raise ConfigError(f"unknown preset {name!r}")
