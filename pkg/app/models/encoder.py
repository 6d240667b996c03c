import torch
import torch.nn as nn

from app.models.seg_head import conv_norm_act


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class PlainEncoder(nn.Module):
    """Learned convolutional image encoder used by the no-diffusion baseline"""

    def __init__(self, in_channels: int, width: int, out_channels: int):
        super().__init__()
        self.width = width
        self.out_channels = out_channels
        self.body = nn.Sequential(
            conv_norm_act(in_channels, width),
            conv_norm_act(width, width),
            conv_norm_act(width, width),
            nn.Conv2d(width, out_channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    @staticmethod
    def parameter_count(in_channels: int, width: int, out_channels: int) -> int:
        # each stage: 3x3 conv weights + bias, then GroupNorm affine
        first = 9 * in_channels * width + width + 2 * width
        inner = 9 * width * width + width + 2 * width
        return first + 2 * inner + width * out_channels + out_channels

    @classmethod
    def matched(cls, in_channels: int, out_channels: int, target_parameters: int, step: int = 8) -> "PlainEncoder":
        """Pick the width (a multiple of step) whose parameter count is closest to target_parameters"""
        width = step
        while cls.parameter_count(in_channels, width + step, out_channels) <= target_parameters:
            width += step
        below = abs(target_parameters - cls.parameter_count(in_channels, width, out_channels))
        above = abs(cls.parameter_count(in_channels, width + step, out_channels) - target_parameters)
        return cls(in_channels, width if below <= above else width + step, out_channels)
