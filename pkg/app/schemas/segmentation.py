from dataclasses import dataclass
from typing import List

import torch
from pydantic import BaseModel, Field, model_validator

from app.core.exceptions import ParameterException


@dataclass
class MaskSet:
    """Binary category masks M of shape (cls, h, w) with category names C"""
    masks: torch.Tensor
    categories: List[str]

    def __post_init__(self):
        if self.masks.dim() != 3:
            raise ParameterException(f"Masks must have shape (cls, h, w), got {tuple(self.masks.shape)}")
        if self.masks.shape[0] != len(self.categories):
            raise ParameterException(f"{self.masks.shape[0]} masks for {len(self.categories)} categories")
        if not torch.all((self.masks == 0) | (self.masks == 1)):
            raise ParameterException("Mask values must be 0 or 1")

    @property
    def present(self) -> List[bool]:
        return [bool(m.any()) for m in self.masks]

    @property
    def present_categories(self) -> List[int]:
        return [i for i, flag in enumerate(self.present) if flag]

    @property
    def spatial_shape(self):
        return tuple(self.masks.shape[-2:])

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]

    @classmethod
    def full(cls, category: int, categories: List[str], size) -> "MaskSet":
        """Reference condition: one category covering the whole image"""
        masks = torch.zeros(len(categories), *size)
        masks[category] = 1.0
        return cls(masks=masks, categories=list(categories))


@dataclass
class SegmentationLogits:
    """Pre-softmax class scores (cls, h, w), or (B, cls, h, w) for a batch"""
    data: torch.Tensor


class LossRecord(BaseModel):
    """Losses of one training step; l_final = lambda1 * l_condit + lambda2 * l_consis"""
    l_condit: float = Field(..., ge=0.0)
    l_consis: float = Field(..., ge=0.0)
    l_final: float
    lambda1: float = 1.0
    lambda2: float = 1.0
    step: int = 0
    degenerate: bool = Field(default=False, description="True when every label in the batch was ignore")

    @model_validator(mode="after")
    def validate_linearity(self) -> "LossRecord":
        expected = self.lambda1 * self.l_condit + self.lambda2 * self.l_consis
        if abs(self.l_final - expected) > 1e-6:
            raise ValueError(f"l_final={self.l_final} differs from lambda-weighted sum {expected}")
        return self
