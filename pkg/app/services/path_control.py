from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from app.core.exceptions import DataException, ShapeException
from app.core.logger import get_logger
from app.schemas.config import TrajectoryConfig
from app.schemas.diffusion import CapturedLayer, ConditionEmbedding, LatentImage
from app.schemas.features import FeatureBundle, StepResult
from app.schemas.segmentation import MaskSet
from app.services.diffusion import DiffusionModel, ddim_invert_step
from app.services.trajectory import capture_features

logger = get_logger(__name__)


def decompose_annotation(label_map: torch.Tensor, class_names: Sequence[str], ignore_index: int = 255) -> MaskSet:
    """
    Split a label map into one binary mask per class

    Args:
        label_map: Integer map (h, w) of class indices, ignore_index for unlabeled pixels
        class_names: Category name for each class index
        ignore_index: Label value that belongs to no mask

    Returns:
        MaskSet with masks (cls, h, w) and categories = class_names

    Raises:
        DataException: If a non-ignore label is outside [0, cls)
    """
    num_classes = len(class_names)
    labels = label_map.long()
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        values = sorted(set(labels[bad].tolist()))
        raise DataException(f"Label values {values} are outside [0, {num_classes})")

    masks = torch.zeros(num_classes, *labels.shape, dtype=torch.float32)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    masks.scatter_(0, safe.unsqueeze(0), valid.unsqueeze(0).float())
    return MaskSet(masks=masks, categories=list(class_names))


def coverage_weights(masks: MaskSet) -> torch.Tensor:
    """
    Per-pixel weights M_i / sum_j M_j; zero everywhere at zero-coverage pixels

    Args:
        masks: Mask set

    Returns:
        Tensor (cls, h, w)
    """
    coverage = masks.masks.sum(dim=0, keepdim=True)
    # coverage is an integer count, so clamping only touches pixels whose masks are all zero
    return masks.masks / coverage.clamp(min=1.0)


def resize_masks(masks: MaskSet, size: Tuple[int, int]) -> MaskSet:
    """Nearest-neighbor resize, which keeps masks binary"""
    if masks.spatial_shape == tuple(size):
        return masks
    resized = F.interpolate(masks.masks.unsqueeze(0), size=tuple(size), mode="nearest")[0]
    return MaskSet(masks=resized, categories=masks.categories)


def _blend(weights: torch.Tensor, present: List[int], values: Dict[int, torch.Tensor],
           uncovered: torch.Tensor, fallback: Optional[torch.Tensor]) -> torch.Tensor:
    blended = None
    for i in present:
        term = weights[i] * values[i]
        blended = term if blended is None else blended + term
    if fallback is not None:
        blended = fallback if blended is None else torch.where(uncovered, fallback, blended)
    return blended


class PathControlledPlan:
    """
    Region-fused step: one denoiser pass per present category, fused by coverage weights

    Zero-coverage pixels take the unconditional candidate. Features captured
    at each decoder layer are blended with the same weights computed at that
    layer's resolution.
    """

    def __init__(self, model: DiffusionModel, maskset: MaskSet):
        self.model = model
        self.maskset = maskset
        self.present = maskset.present_categories
        self.conditions: Dict[int, ConditionEmbedding] = {
            i: model.embed_condition([maskset.categories[i]]) for i in self.present
        }
        self.null_condition = model.embed_condition(None)
        self.weights = coverage_weights(maskset)
        self.uncovered = self.weights.sum(dim=0) == 0
        self.needs_fallback = bool(self.uncovered.any())

    @property
    def calls_per_step(self) -> int:
        return len(self.present) + int(self.needs_fallback)

    def _layer_weights(self, size: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        resized = resize_masks(self.maskset, size)
        weights = coverage_weights(resized)
        return weights, weights.sum(dim=0) == 0

    def __call__(self, latent: LatentImage, t: int, t_next: Optional[int], layers: List[int]) -> StepResult:
        if latent.spatial_shape != self.maskset.spatial_shape:
            raise ShapeException(
                f"Mask resolution {self.maskset.spatial_shape} does not match latent resolution {latent.spatial_shape}"
            )

        schedule = self.model.schedule
        candidates: Dict[int, torch.Tensor] = {}
        captures: Dict[int, Dict[int, CapturedLayer]] = {}
        for i in self.present:
            out = self.model.predict_noise(latent, t, self.conditions[i], capture=layers)
            captures[i] = out.captured or {}
            if t_next is not None:
                candidates[i] = ddim_invert_step(latent, out.eps_hat, t, t_next, schedule).data

        fallback_latent = None
        fallback_capture: Dict[int, CapturedLayer] = {}
        if self.needs_fallback:
            out = self.model.predict_noise(latent, t, self.null_condition, capture=layers)
            fallback_capture = out.captured or {}
            if t_next is not None:
                fallback_latent = ddim_invert_step(latent, out.eps_hat, t, t_next, schedule).data

        next_latent = None
        if t_next is not None:
            data = _blend(self.weights.unsqueeze(1), self.present, candidates, self.uncovered, fallback_latent)
            next_latent = LatentImage(data=data, timestep=int(t_next))

        captured: Dict[int, CapturedLayer] = {}
        for layer in layers:
            reference = captures[self.present[0]][layer] if self.present else fallback_capture[layer]
            weights, uncovered = self._layer_weights(tuple(reference.inter.shape[-2:]))
            weights = weights.unsqueeze(1)
            fb = fallback_capture.get(layer)
            captured[layer] = CapturedLayer(
                inter=_blend(weights, self.present, {i: captures[i][layer].inter for i in self.present},
                             uncovered, fb.inter if fb is not None else None),
                cross=_blend(weights, self.present, {i: captures[i][layer].cross for i in self.present},
                             uncovered, fb.cross if fb is not None else None),
            )

        return StepResult(next_latent=next_latent, captured=captured, denoiser_calls=self.calls_per_step)


def fused_step(model: DiffusionModel, I_t: LatentImage, maskset: MaskSet, t: int, t_next: int) -> LatentImage:
    """
    One path-controlled inversion step

    Args:
        model: Frozen or unfrozen diffusion model
        I_t: Latent at timestep t
        maskset: Masks at the latent resolution
        t: Current timestep
        t_next: Next timestep on the trajectory

    Returns:
        Fused latent at t_next

    Raises:
        ShapeException: If mask and latent resolutions differ
    """
    plan = PathControlledPlan(model, maskset)
    return plan(I_t, t, t_next, []).next_latent


def run_conditional_trajectory(
    model: DiffusionModel,
    image: LatentImage,
    maskset: MaskSet,
    cfg: TrajectoryConfig
) -> FeatureBundle:
    """Capture features along the path-controlled trajectory of an image under its masks"""
    plan = PathControlledPlan(model, maskset)
    logger.debug(
        f"Conditional trajectory: {len(plan.present)} present categories, "
        f"{plan.calls_per_step} denoiser calls per step"
    )
    return capture_features(model, image, plan, cfg)
