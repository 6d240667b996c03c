import hashlib
from typing import List, Optional

import torch
import torch.nn.functional as F

from app.core.exceptions import NumericException, ParameterException, ShapeException
from app.core.logger import get_logger
from app.models.fusion import FusionBlock
from app.repository.feature_cache import FeatureCache
from app.schemas.config import TrajectoryConfig
from app.schemas.diffusion import LatentImage
from app.schemas.features import FeatureBundle, FusedFeature
from app.schemas.segmentation import MaskSet
from app.services.diffusion import DiffusionModel
from app.services.path_control import run_conditional_trajectory
from app.services.trajectory import capture_features, unconditional_plan, validate_trajectory
from app.utils.hashing import tensor_digest

logger = get_logger(__name__)


def align_and_concat(bundle: FeatureBundle) -> torch.Tensor:
    """
    Resize every captured map to the finest captured resolution and concatenate

    Channel order is t ascending, then l ascending, F_inter before F_cross,
    independent of the order entries were added.

    Args:
        bundle: Complete feature bundle

    Returns:
        Tensor (sum of channels, H, W)

    Raises:
        ParameterException: If the bundle is empty
    """
    if len(bundle) == 0:
        raise ParameterException("Cannot concatenate an empty feature bundle")

    keys = bundle.sorted_keys()
    size = max((tuple(bundle[key].inter.shape[-2:]) for key in keys), key=lambda hw: hw[0] * hw[1])

    def aligned(x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) == size:
            return x
        return F.interpolate(x.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]

    parts = []
    for key in keys:
        pair = bundle[key]
        parts.append(aligned(pair.inter))
        parts.append(aligned(pair.cross))
    return torch.cat(parts, dim=0)


def fuse(stacked: torch.Tensor, block: FusionBlock) -> FusedFeature:
    """
    Apply the trainable aggregating block F_conv

    Args:
        stacked: (C_in, H, W) or (B, C_in, H, W) output of align_and_concat
        block: Fusion block whose input width must equal C_in

    Returns:
        FusedFeature with the same batch layout as the input

    Raises:
        ShapeException: On channel mismatch
        NumericException: If the fused output is not finite
    """
    batched = stacked.dim() == 4
    if stacked.shape[-3] != block.in_channels:
        raise ShapeException(f"Stacked features have {stacked.shape[-3]} channels, fusion block expects {block.in_channels}")
    out = block(stacked if batched else stacked.unsqueeze(0))
    if not torch.isfinite(out).all():
        raise NumericException("Fused diffusion features contain NaN or Inf")
    return FusedFeature(data=out if batched else out[0])


def condition_digest(maskset: Optional[MaskSet]) -> str:
    if maskset is None:
        return "uncond"
    digest = hashlib.sha256(tensor_digest(maskset.masks).encode())
    digest.update(",".join(maskset.categories).encode())
    return digest.hexdigest()[:16]


class DiffusionFeatureExtractor:
    """
    Stacked multi-step features of a frozen diffusion model, optionally cached on disk

    Read-only over the model, so one extractor may serve several threads.
    """

    def __init__(self, model: DiffusionModel, trajectory: TrajectoryConfig, cache: Optional[FeatureCache] = None):
        self.model = model
        self.trajectory = trajectory
        self.layers: List[int] = validate_trajectory(model, trajectory)
        self.cache = cache
        self._backbone_digest: Optional[str] = None

    @property
    def stacked_channels(self) -> int:
        per_step = sum(self.model.unet.decoder_channels[layer] + self.model.num_tokens for layer in self.layers)
        return per_step * len(self.trajectory.steps)

    @property
    def output_scale(self) -> int:
        """Downsampling factor of the finest captured layer"""
        return min(self.model.unet.decoder_scales[layer] for layer in self.layers)

    def backbone_digest(self) -> str:
        if self._backbone_digest is None:
            checksums = self.model.checksums()
            self._backbone_digest = hashlib.sha256(
                (checksums["denoiser"] + checksums["condition_embedder"]).encode()
            ).hexdigest()[:16]
        return self._backbone_digest

    def cache_key(self, image: torch.Tensor, maskset: Optional[MaskSet]) -> str:
        digest = hashlib.sha256()
        digest.update(tensor_digest(image).encode())
        digest.update(self.trajectory.model_dump_json().encode())
        digest.update(condition_digest(maskset).encode())
        digest.update(self.backbone_digest().encode())
        return digest.hexdigest()[:32]

    def bundle(self, image: torch.Tensor, maskset: Optional[MaskSet] = None) -> FeatureBundle:
        latent = LatentImage(data=image, timestep=0)
        if maskset is None:
            return capture_features(self.model, latent, unconditional_plan(self.model), self.trajectory)
        return run_conditional_trajectory(self.model, latent, maskset, self.trajectory)

    def stacked(self, image: torch.Tensor, maskset: Optional[MaskSet] = None) -> torch.Tensor:
        """Aligned and concatenated features for one image (C, H, W)"""
        key = None
        if self.cache is not None:
            key = self.cache_key(image, maskset)
            cached = self.cache.get(key)
            if cached is not None:
                return cached

        stacked = align_and_concat(self.bundle(image, maskset))
        if self.cache is not None:
            self.cache.put(key, stacked)
        return stacked

    def stacked_batch(self, images: torch.Tensor, masksets: Optional[List[Optional[MaskSet]]] = None) -> torch.Tensor:
        masksets = masksets if masksets is not None else [None] * images.shape[0]
        return torch.stack([self.stacked(image, maskset) for image, maskset in zip(images, masksets)])


def extract_diffusion_features(
    extractor: DiffusionFeatureExtractor,
    image: torch.Tensor,
    condition: Optional[MaskSet],
    block: FusionBlock
) -> FusedFeature:
    """
    F_diff = F_conv(concat over (t, l) of [F_inter, F_cross])

    With condition None the plain unconditional trajectory gives F_diff^uncon;
    with a MaskSet the path-controlled trajectory gives F_diff^con.
    """
    return fuse(extractor.stacked(image, condition), block)
