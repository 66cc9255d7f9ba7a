"""
Config loader for mcdnet.

Two layers:
  - Settings: process-level knobs read ONLY from the environment (.env),
    never from run files.
  - RunConfig: the YAML run file (sections model/train/augment/data) parsed
    into frozen pydantic models; unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Literal, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


@dataclass
class Settings:
    """Process settings loaded from environment variables (.env)."""
    log_level: str = "INFO"
    checked: bool = False
    output_dir: str = "runs"
    report_resolution: int = 1024


def load_settings() -> Settings:
    """Load settings from .env, applying defaults when absent."""
    try:
        load_dotenv()
    except Exception:
        pass

    def as_bool(v: Optional[str], default: bool = False) -> bool:
        if v is None:
            return default
        return str(v).strip().lower() in {"1", "true", "yes", "on"}

    try:
        report_resolution = int(os.getenv("MCDNET_REPORT_RESOLUTION", "1024"))
    except ValueError:
        report_resolution = 1024
    return Settings(
        log_level=os.getenv("MCDNET_LOG_LEVEL", "INFO").upper(),
        checked=as_bool(os.getenv("MCDNET_CHECKED"), False),
        output_dir=os.getenv("MCDNET_OUTPUT_DIR", "runs"),
        report_resolution=report_resolution,
    )


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CbamConfig(_Frozen):
    channels: int = Field(gt=0)
    reduction_ratio: int = Field(default=16, gt=0)
    spatial_kernel: int = Field(default=7, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "CbamConfig":
        if self.channels // self.reduction_ratio < 1:
            raise ValueError(f"channels/r must be >= 1 (channels={self.channels}, r={self.reduction_ratio})")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial_kernel must be odd")
        return self

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction_ratio


class ModelConfig(_Frozen):
    backbone: Literal["mobilenetv2"] = "mobilenetv2"
    width_multiplier: float = Field(default=1.0, gt=0)
    use_cbam: bool = True
    num_classes: int = Field(default=2, ge=2)
    output_stride: Literal[8, 16] = 16
    aspp_rates: Tuple[int, int, int] = (6, 12, 18)
    aspp_channels: int = Field(default=256, gt=0)
    decoder_lowlevel_channels: int = Field(default=48, gt=0)
    channel_scale: float = Field(default=1.0, gt=0)
    cbam_reduction: int = Field(default=16, gt=0)
    cbam_kernel: int = Field(default=7, gt=0)

    @field_validator("aspp_rates")
    @classmethod
    def _rates_increasing(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if v[0] <= 0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"aspp_rates must be positive and strictly increasing, got {v}")
        return v

    @field_validator("cbam_kernel")
    @classmethod
    def _kernel_odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"cbam_kernel must be odd, got {v}")
        return v

    @property
    def label(self) -> str:
        return "MobileNetV2 + CBAM" if self.use_cbam else "MobileNetV2"


class TrainConfig(_Frozen):
    lr0: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    batch_size: int = Field(default=16, gt=0)
    max_epochs: int = Field(default=200, gt=0)
    patience: int = Field(default=15, gt=0)
    class_weights: Tuple[float, ...] = (0.5, 0.5)
    lr_min: float = Field(default=0.0, ge=0)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    max_steps: Optional[int] = Field(default=None, gt=0)
    augment: bool = True
    eval_batch_size: int = Field(default=4, gt=0)
    recalibrate_bn: bool = True

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if any(w < 0 for w in self.class_weights):
            raise ValueError("class_weights must be non-negative")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self


class AugmentConfig(_Frozen):
    scale_range: Tuple[float, float] = (0.5, 2.0)
    hflip_p: float = Field(default=0.5, ge=0, le=1)
    vflip_p: float = Field(default=0.5, ge=0, le=1)
    rotation_deg: float = Field(default=30.0, ge=0)
    blur_sigma_range: Tuple[float, float] = (0.1, 2.0)
    blur_p: float = Field(default=0.25, ge=0, le=1)
    out_size: Optional[Tuple[int, int]] = None

    @model_validator(mode="after")
    def _check(self) -> "AugmentConfig":
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.blur_sigma_range[0] < 0 or self.blur_sigma_range[1] < self.blur_sigma_range[0]:
            raise ValueError(f"blur_sigma_range must be non-negative and ordered, got {self.blur_sigma_range}")
        if self.out_size is not None and min(self.out_size) < 1:
            raise ValueError("out_size must be positive")
        return self


class RegionBox(_Frozen):
    name: str
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    @model_validator(mode="after")
    def _check(self) -> "RegionBox":
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValueError(f"region {self.name}: bounds must satisfy min < max")
        return self

    def contains(self, lon: float, lat: float) -> bool:
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    def overlaps(self, other: "RegionBox") -> bool:
        return (self.lon_min < other.lon_max and other.lon_min < self.lon_max
                and self.lat_min < other.lat_max and other.lat_min < self.lat_max)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.lon_min + self.lon_max) / 2.0, (self.lat_min + self.lat_max) / 2.0


REGION_1 = RegionBox(name="region1", lon_min=98.937, lon_max=100.730, lat_min=28.491, lat_max=30.565)
REGION_2 = RegionBox(name="region2", lon_min=101.015, lon_max=102.907, lat_min=28.336, lat_max=33.079)
DEFAULT_REGIONS = (REGION_1, REGION_2)


class DataConfig(_Frozen):
    manifest: Path
    split_ratio: Tuple[int, int] = (9, 1)
    regions: List[RegionBox] = Field(default_factory=lambda: list(DEFAULT_REGIONS))

    @field_validator("split_ratio")
    @classmethod
    def _ratio_positive(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if min(v) < 1:
            raise ValueError("split_ratio parts must be >= 1")
        return v


class RunConfig(_Frozen):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    data: DataConfig
    output_dir: Path = Path("runs")
    seed: int = 0
    report_resolution: int = Field(default=1024, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _inherit_seed(cls, values):
        # the train section follows the top-level seed unless it sets its own
        if isinstance(values, dict) and "seed" in values:
            train = dict(values.get("train") or {})
            train.setdefault("seed", values["seed"])
            values = {**values, "train": train}
        return values


def load_run_config(path: Path | str) -> RunConfig:
    """Parse a YAML run file; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML in {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    base = path.resolve().parent
    data = cfg.data.model_copy(update={"manifest": (base / cfg.data.manifest).resolve()})
    return cfg.model_copy(update={"data": data, "output_dir": (base / cfg.output_dir).resolve()})


def config_to_yaml(cfg: BaseModel | Mapping[str, Any]) -> str:
    data = cfg.model_dump(mode="json") if isinstance(cfg, BaseModel) else dict(cfg)
    return yaml.safe_dump(data, sort_keys=False)
