from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import torch

from app.core.exceptions import ParameterException
from app.schemas.diffusion import CapturedLayer, LatentImage


@dataclass
class FeatureBundle:
    """F_inter and F_cross captured at each (timestep, decoder layer) pair"""
    entries: Dict[Tuple[int, int], CapturedLayer] = field(default_factory=dict)

    def add(self, t: int, layer: int, pair: CapturedLayer) -> None:
        key = (int(t), int(layer))
        if key in self.entries:
            raise ParameterException(f"Feature bundle already holds an entry for (t={t}, l={layer})")
        if pair.inter.shape[-2:] != pair.cross.shape[-2:]:
            raise ParameterException(
                f"F_inter {tuple(pair.inter.shape)} and F_cross {tuple(pair.cross.shape)} differ in spatial shape"
            )
        self.entries[key] = pair

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: Tuple[int, int]) -> CapturedLayer:
        return self.entries[key]

    def sorted_keys(self) -> List[Tuple[int, int]]:
        return sorted(self.entries)

    def is_complete(self, steps: Iterable[int], layers: Iterable[int]) -> bool:
        expected = {(t, layer) for t in steps for layer in layers}
        return set(self.entries) == expected


@dataclass
class FusedFeature:
    """F_diff of shape (d_out, H, W), or (B, d_out, H, W) for a batch"""
    data: torch.Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


@dataclass
class StepResult:
    """Outcome of one trajectory step under a condition plan"""
    next_latent: Optional[LatentImage]
    captured: Dict[int, CapturedLayer]
    denoiser_calls: int = 1
