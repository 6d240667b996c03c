from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import ShapeException
from app.models.unet import norm_groups


def conv_norm_act(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.GroupNorm(norm_groups(out_channels), out_channels),
        nn.SiLU(),
    )


class SegmentationHead(nn.Module):
    """Segment head D: two conv-norm-activation stages and a 1x1 classifier"""

    def __init__(self, in_channels: int, num_classes: int, hidden_channels: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.stage1 = conv_norm_act(in_channels, hidden_channels)
        self.stage2 = conv_norm_act(hidden_channels, hidden_channels)
        self.classifier = nn.Conv2d(hidden_channels, num_classes, 1)

    def forward(self, x: torch.Tensor, output_size: Tuple[int, int]) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeException(f"Segmentation head expects {self.in_channels} channels, got {x.shape[1]}")
        logits = self.classifier(self.stage2(self.stage1(x)))
        if tuple(logits.shape[-2:]) != tuple(output_size):
            logits = F.interpolate(logits, size=output_size, mode="bilinear", align_corners=False)
        return logits
