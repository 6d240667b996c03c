from dataclasses import dataclass, field
from typing import Dict, Optional

import torch


@dataclass(frozen=True)
class Schedule:
    """Noise-schedule coefficients indexed by timestep, held in float64"""
    T_train: int
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor
    beta_start: float
    beta_end: float

    def alpha_bar(self, t: int) -> torch.Tensor:
        return self.alphas_cumprod[t]

    def contains(self, t: int) -> bool:
        return 0 <= t < self.T_train


@dataclass
class LatentImage:
    """Pixel-space latent I_t of shape (channels, h, w) at timestep t"""
    data: torch.Tensor
    timestep: int = 0

    @property
    def spatial_shape(self):
        return tuple(self.data.shape[-2:])


@dataclass
class ConditionEmbedding:
    """K padded token embeddings; is_null marks the C = empty condition"""
    tokens: torch.Tensor
    is_null: bool = False
    categories: tuple = ()

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class CapturedLayer:
    """Decoder-layer capture from one denoiser call: F_inter (d_l, h, w) and F_cross (K, h, w)"""
    inter: torch.Tensor
    cross: torch.Tensor


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    captured: Optional[Dict[int, CapturedLayer]] = field(default=None)
