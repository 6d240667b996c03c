import math
from typing import Dict, List, Optional, Set, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from app.core.exceptions import ParameterException, ShapeException
from app.schemas.config import UNetConfig
from app.schemas.diffusion import CapturedLayer


def norm_groups(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)"""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial queries attend to the K condition tokens"""

    def __init__(self, channels: int, cond_dim: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ParameterException(f"{channels} channels cannot be split over {heads} attention heads")
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns the residual output and attention probabilities (B, heads, h*w, K)"""
        _, _, height, _ = x.shape
        tokens = rearrange(self.norm(x), "b c h w -> b (h w) c")
        q = rearrange(self.to_q(tokens), "b n (heads d) -> b heads n d", heads=self.heads)
        k = rearrange(self.to_k(context), "b k (heads d) -> b heads k d", heads=self.heads)
        v = rearrange(self.to_v(context), "b k (heads d) -> b heads k d", heads=self.heads)

        probs = torch.softmax(torch.einsum("bhnd,bhkd->bhnk", q, k) * self.scale, dim=-1)
        out = rearrange(torch.einsum("bhnk,bhkd->bhnd", probs, v), "b heads n d -> b n (heads d)")
        out = rearrange(self.to_out(out), "b (h w) c -> b c h w", h=height)
        return x + out, probs


class DecoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int, cond_dim: int, heads: int):
        super().__init__()
        self.res = ResBlock(in_channels, out_channels, temb_dim)
        self.attn = CrossAttention(out_channels, cond_dim, heads)

    def forward(self, h, temb, context):
        inter = self.res(h, temb)
        out, probs = self.attn(inter, context)
        return out, inter, probs


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class ConditionalUNet(nn.Module):
    """
    Small noise-prediction U-Net with cross-attention in every decoder block

    Decoder layers are numbered in execution order, coarsest first. Layer l
    runs at 1 / decoder_scales[l] of the input resolution.
    """

    def __init__(self, config: UNetConfig, cond_dim: int):
        super().__init__()
        widths = [config.base_width * m for m in config.channel_mults]
        temb_dim = config.base_width * 4
        self.config = config
        self.base_width = config.base_width
        self.num_levels = len(widths)

        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_width, temb_dim),
            nn.SiLU(),
            nn.Linear(temb_dim, temb_dim),
        )
        self.input_conv = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.encoder = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_channels: List[int] = []
        ch = widths[0]
        for level, width in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                blocks.append(ResBlock(ch, width, temb_dim))
                ch = width
                skip_channels.append(ch)
            self.encoder.append(blocks)
            if level < self.num_levels - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_res1 = ResBlock(ch, ch, temb_dim)
        self.mid_attn = CrossAttention(ch, cond_dim, config.attention_heads)
        self.mid_res2 = ResBlock(ch, ch, temb_dim)

        self.decoder = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        self.decoder_channels: List[int] = []
        self.decoder_scales: List[int] = []
        for level in reversed(range(self.num_levels)):
            for _ in range(config.num_res_blocks):
                skip = skip_channels.pop()
                self.decoder.append(DecoderBlock(ch + skip, widths[level], temb_dim, cond_dim, config.attention_heads))
                ch = widths[level]
                self.decoder_channels.append(ch)
                self.decoder_scales.append(2 ** level)
            if level > 0:
                self.upsamplers.append(Upsample(ch))

        self.out_norm = nn.GroupNorm(norm_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, config.in_channels, 3, padding=1)

    @property
    def num_decoder_layers(self) -> int:
        return len(self.decoder)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        context: torch.Tensor,
        capture_layers: Optional[Set[int]] = None
    ) -> Tuple[torch.Tensor, Optional[Dict[int, CapturedLayer]]]:
        """
        Predict noise for x (B, C, H, W) at timesteps t (B,) under context (B, K, d_cond)

        When capture_layers is given, the residual-block output and the
        head-averaged cross-attention map of each listed decoder layer are
        returned alongside the prediction.
        """
        factor = 2 ** (self.num_levels - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeException(f"Spatial size {tuple(x.shape[-2:])} must be divisible by {factor}")

        temb = self.time_mlp(timestep_embedding(t, self.base_width))
        h = self.input_conv(x)
        skips = []
        for level, blocks in enumerate(self.encoder):
            for block in blocks:
                h = block(h, temb)
                skips.append(h)
            if level < self.num_levels - 1:
                h = self.downsamplers[level](h)

        h = self.mid_res1(h, temb)
        h, _ = self.mid_attn(h, context)
        h = self.mid_res2(h, temb)

        captured: Optional[Dict[int, CapturedLayer]] = {} if capture_layers is not None else None
        layer = 0
        up = 0
        for level in reversed(range(self.num_levels)):
            for _ in range(self.config.num_res_blocks):
                h, inter, probs = self.decoder[layer](torch.cat([h, skips.pop()], dim=1), temb, context)
                if captured is not None and layer in capture_layers:
                    cross = rearrange(probs.mean(dim=1), "b (h w) k -> b k h w", h=inter.shape[-2])
                    captured[layer] = CapturedLayer(inter=inter, cross=cross)
                layer += 1
            if level > 0:
                h = self.upsamplers[up](h)
                up += 1

        eps = self.out_conv(F.silu(self.out_norm(h)))
        return eps, captured
