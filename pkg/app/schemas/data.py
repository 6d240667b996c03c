from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

Color = Tuple[float, float, float]


class Texture(str, Enum):
    FLAT = "flat"
    NOISE = "noise"
    STRIPES = "stripes"


class ClassAppearance(BaseModel):
    """Color distribution of one class: per-image mean drawn around `mean` with `jitter`"""
    mean: Color
    jitter: float = Field(default=0.05, ge=0.0)


class DomainSpec(BaseModel):
    """Appearance of one synthetic domain; geometry rules are shared by all domains"""
    name: str = Field(..., min_length=1)
    palette: List[ClassAppearance] = Field(..., description="Appearance per class, background first")
    texture: Texture = Texture.FLAT
    noise_sigma: float = Field(default=0.0, ge=0.0, description="Additive Gaussian noise in [0, 1] units")
    stripe_period: int = Field(default=4, ge=2)
    stripe_contrast: float = Field(default=0.25, ge=0.0, le=1.0)
    blur_radius: int = Field(default=0, ge=0)
    resolution: int = Field(default=32, ge=8)

    model_config = ConfigDict(json_schema_extra={
        "example": {"name": "target-noise", "texture": "noise", "noise_sigma": 0.15, "blur_radius": 0}
    })

    @field_validator("palette")
    @classmethod
    def validate_palette(cls, v: List[ClassAppearance]) -> List[ClassAppearance]:
        if len(v) < 2:
            raise ValueError("palette needs a background and at least one shape class")
        return v


class ShapeRecord(BaseModel):
    kind: str
    class_index: int
    cx: int
    cy: int
    radius: int


class DatasetManifest(BaseModel):
    domain: str
    seed: int
    resolution: int
    ignore_index: int = 255
    class_names: List[str]
    files: List[str]
    shapes: Dict[str, List[ShapeRecord]] = Field(default_factory=dict)


class ConfusionMatrix(BaseModel):
    """counts[g][p]: pixels with ground truth g predicted as p"""
    counts: List[List[int]]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.array.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(counts=(self.array + other.array).tolist())


class IoUResult(BaseModel):
    per_class: List[Optional[float]] = Field(..., description="None where the class union is empty")
    mean: float
    pixel_accuracy: Optional[float] = None


class BenchmarkRow(BaseModel):
    dataset: str
    role: str = Field(..., description="source, target or average")
    miou: float
    per_class_iou: List[Optional[float]] = Field(default_factory=list)
    pixel_accuracy: Optional[float] = None
    reference_miou: Optional[float] = None
    images: int = 0


class BenchmarkReport(BaseModel):
    run_id: str
    config_hash: str
    class_names: List[str]
    rows: List[BenchmarkRow]

    @property
    def target_rows(self) -> List[BenchmarkRow]:
        return [row for row in self.rows if row.role == "target"]

    @property
    def average(self) -> Optional[BenchmarkRow]:
        return next((row for row in self.rows if row.role == "average"), None)

    def row(self, dataset: str) -> BenchmarkRow:
        return next(row for row in self.rows if row.dataset == dataset)


class AblationArm(BaseModel):
    name: str
    diff: bool
    ipkl: bool
    consistency: str
    overrides: Dict[str, Any] = Field(default_factory=dict)


class AblationRow(BaseModel):
    arm: AblationArm
    config_hash: str
    source_miou: float
    target_miou: Dict[str, float]
    average_miou: float


class AblationReport(BaseModel):
    run_id: str
    config_hash: str
    rows: List[AblationRow]
    ordering_holds: bool
    ordering: List[str]
