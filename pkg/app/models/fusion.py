import torch
import torch.nn as nn

from app.core.exceptions import ShapeException
from app.models.unet import norm_groups


class FusionBlock(nn.Module):
    """F_conv: 1x1 conv, norm, activation, 3x3 conv, norm, activation"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1),
            nn.GroupNorm(norm_groups(out_channels), out_channels),
            nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.GroupNorm(norm_groups(out_channels), out_channels),
            nn.SiLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeException(f"Fusion block expects {self.in_channels} channels, got {x.shape[1]}")
        return self.block(x)
