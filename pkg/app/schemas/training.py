from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class FreezeReport(BaseModel):
    """Checksum comparison of every frozen parameter group"""
    step: int = 0
    groups: Dict[str, bool] = Field(default_factory=dict, description="True where the stored checksum still matches")

    @property
    def passed(self) -> bool:
        return all(self.groups.values())

    @property
    def failed_groups(self) -> List[str]:
        return [name for name, ok in self.groups.items() if not ok]


class GradientReport(BaseModel):
    """L2 norm of the gradients held by each parameter group after backward"""
    step: int = 0
    norms: Dict[str, float]
    frozen_groups: List[str] = Field(default_factory=list)

    @property
    def frozen_are_zero(self) -> bool:
        return all(self.norms[name] == 0.0 for name in self.frozen_groups)


class EvalSnapshot(BaseModel):
    step: int
    dataset: str
    miou: float
    pixel_accuracy: Optional[float] = None
    images: int


class PretrainResult(BaseModel):
    """Loss curve of a pretraining run and its running-average trend"""
    losses: List[float]
    window: int
    moving_average: List[float] = Field(..., description="Entry k is the mean loss over steps k .. k + window - 1")
    monotone: bool = Field(..., description="True when the running average, sampled once per window, never increases")

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    @property
    def initial_running_loss(self) -> Optional[float]:
        return self.moving_average[0] if self.moving_average else None

    @property
    def final_running_loss(self) -> Optional[float]:
        return self.moving_average[-1] if self.moving_average else None
