import hashlib
import json
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ConsistencyKind(str, Enum):
    """Consistency objective between the conditional and unconditional branches"""
    L2 = "l2"
    KL = "kl"
    NONE = "none"


class TrainMode(str, Enum):
    """Which feature source and objective the segmentation trainer uses"""
    IPKL = "ipkl"
    DIFF_ONLY = "diff_only"
    BASELINE = "baseline"


DEFAULT_CLASS_NAMES = ["background", "circle", "square", "triangle"]


class ConfigSection(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleConfig(ConfigSection):
    T_train: int = Field(default=1000, ge=2, description="Number of training timesteps")
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=0.02, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def validate_range(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class UNetConfig(ConfigSection):
    in_channels: int = Field(default=3, ge=1)
    base_width: int = Field(default=64, ge=4)
    channel_mults: List[int] = Field(default_factory=lambda: [1, 2, 2], description="Width multiplier per resolution")
    num_res_blocks: int = Field(default=2, ge=1)
    attention_heads: int = Field(default=4, ge=1)

    @field_validator("channel_mults")
    @classmethod
    def validate_mults(cls, v: List[int]) -> List[int]:
        if not v or any(m < 1 for m in v):
            raise ValueError("channel_mults must be a nonempty list of positive integers")
        return v

    @property
    def num_decoder_layers(self) -> int:
        return len(self.channel_mults) * self.num_res_blocks


class ConditionConfig(ConfigSection):
    tokens: int = Field(default=8, ge=1, description="Padded prompt length K")
    embed_dim: int = Field(default=64, ge=1, description="Token embedding width d_cond")


class TrajectoryConfig(ConfigSection):
    """Timesteps visited by the inversion trajectory and decoder layers captured at each"""
    steps: List[int] = Field(default_factory=lambda: [1, 334, 667])
    layers: Optional[List[int]] = Field(default=None, description="Decoder layer indices; None captures all")

    @field_validator("steps")
    @classmethod
    def validate_steps(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("steps must not be empty")
        if any(s < 0 for s in v):
            raise ValueError("steps must be nonnegative")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("steps must be strictly increasing")
        return v

    @field_validator("layers")
    @classmethod
    def validate_layers(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is None:
            return v
        if not v:
            raise ValueError("layers must not be empty")
        if any(layer < 0 for layer in v):
            raise ValueError("layer indices must be nonnegative")
        if len(set(v)) != len(v):
            raise ValueError("layer indices must be unique")
        return sorted(v)

    def resolve_layers(self, num_decoder_layers: int) -> List[int]:
        if self.layers is None:
            return list(range(num_decoder_layers))
        return list(self.layers)


class FusionConfig(ConfigSection):
    out_channels: int = Field(default=256, ge=1, description="Width of F_diff")


class HeadConfig(ConfigSection):
    hidden_channels: int = Field(default=128, ge=1)


class TrainingConfig(ConfigSection):
    mode: TrainMode = TrainMode.IPKL
    steps: int = Field(default=1000, ge=0)
    batch_size: int = Field(default=4, ge=1)
    lambda1: float = Field(default=1.0, ge=0.0)
    lambda2: float = Field(default=1.0, ge=0.0)
    consistency: ConsistencyKind = ConsistencyKind.L2
    lr: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    warmup_steps: int = Field(default=100, ge=0)
    hflip: bool = True
    freeze_check_every: int = Field(default=50, ge=1)
    eval_every: int = Field(default=250, ge=1)
    eval_images: int = Field(default=32, ge=1, description="Source images scored per periodic eval snapshot")
    log_every: int = Field(default=25, ge=1)


class PretrainConfig(ConfigSection):
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=2e-4, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    condition_dropout: float = Field(default=0.1, ge=0.0, le=1.0)
    moving_average_window: int = Field(default=200, ge=1)
    log_every: int = Field(default=100, ge=1)


class DataConfig(ConfigSection):
    root: str = "data"
    source: str = "source-flat"
    targets: List[str] = Field(default_factory=lambda: ["target-noise", "target-restyle"])
    n_images: int = Field(default=200, ge=1)
    resolution: int = Field(default=32, ge=8)
    ignore_index: int = 255
    class_names: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


class BenchmarkConfig(ConfigSection):
    max_images: Optional[int] = Field(default=None, ge=1, description="Cap on images scored per dataset")
    with_reference: bool = False


class RunConfig(BaseModel):
    """Every knob of a run; its canonical hash stamps all artifacts"""
    seed: int = 0
    output_dir: str = "runs"
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    condition: ConditionConfig = Field(default_factory=ConditionConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    benchmark: BenchmarkConfig = Field(default_factory=BenchmarkConfig)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def validate_cross_section(self) -> "RunConfig":
        if self.trajectory.steps[-1] >= self.schedule.T_train:
            raise ValueError(f"trajectory steps must be below T_train={self.schedule.T_train}")
        if self.trajectory.layers is not None and self.trajectory.layers[-1] >= self.unet.num_decoder_layers:
            raise ValueError(f"trajectory layers must be below {self.unet.num_decoder_layers}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]
