from typing import List, Optional, Protocol, Sequence

from app.core.exceptions import ParameterException, StateException
from app.core.logger import get_logger
from app.schemas.config import TrajectoryConfig
from app.schemas.diffusion import LatentImage
from app.schemas.features import FeatureBundle, StepResult
from app.services.diffusion import DiffusionModel, ddim_invert_step

logger = get_logger(__name__)


class ConditionPlan(Protocol):
    """Advances a latent by one trajectory step and returns the features it captured"""

    def __call__(self, latent: LatentImage, t: int, t_next: Optional[int], layers: List[int]) -> StepResult:
        ...


class PromptPlan:
    """Plain inversion step under one fixed prompt; no categories means the unconditional branch"""

    def __init__(self, model: DiffusionModel, categories: Optional[Sequence[str]] = None):
        self.model = model
        self.condition = model.embed_condition(categories)

    def __call__(self, latent: LatentImage, t: int, t_next: Optional[int], layers: List[int]) -> StepResult:
        out = self.model.predict_noise(latent, t, self.condition, capture=layers)
        next_latent = None
        if t_next is not None:
            next_latent = ddim_invert_step(latent, out.eps_hat, t, t_next, self.model.schedule)
        return StepResult(next_latent=next_latent, captured=out.captured or {}, denoiser_calls=1)


def unconditional_plan(model: DiffusionModel) -> PromptPlan:
    return PromptPlan(model, None)


def validate_trajectory(model: DiffusionModel, cfg: TrajectoryConfig) -> List[int]:
    """Check steps and layers against the model; return the resolved layer list"""
    outside = [t for t in cfg.steps if not model.schedule.contains(t)]
    if outside:
        raise ParameterException(f"Trajectory steps outside the schedule [0, {model.schedule.T_train}): {outside}")
    layers = cfg.resolve_layers(model.num_decoder_layers)
    invalid = [layer for layer in layers if not 0 <= layer < model.num_decoder_layers]
    if invalid:
        raise ParameterException(f"Decoder layers out of range [0, {model.num_decoder_layers}): {invalid}")
    return layers


def capture_features(
    model: DiffusionModel,
    image: LatentImage,
    cond_plan: ConditionPlan,
    cfg: TrajectoryConfig
) -> FeatureBundle:
    """
    Run the inversion trajectory over cfg.steps and record features at every step

    The clean image is taken as the latent at the first configured step; each
    later step is reached by inverting with the noise predicted at the previous one.

    Args:
        model: Frozen diffusion model
        image: Clean image at timestep 0 (or already stamped with the first step)
        cond_plan: Condition plan deciding how each step is taken
        cfg: Trajectory configuration

    Returns:
        FeatureBundle with one entry per (step, layer)

    Raises:
        StateException: If the denoiser weights are not frozen
        ParameterException: If a step or layer is outside the model's range
    """
    if not model.is_frozen:
        raise StateException("Feature capture requires a frozen diffusion model")
    layers = validate_trajectory(model, cfg)
    if image.timestep not in (0, cfg.steps[0]):
        raise ParameterException(f"Trajectory must start from a clean image, got timestep {image.timestep}")

    bundle = FeatureBundle()
    latent = LatentImage(data=image.data, timestep=cfg.steps[0])
    calls = 0
    for k, t in enumerate(cfg.steps):
        t_next = cfg.steps[k + 1] if k + 1 < len(cfg.steps) else None
        result = cond_plan(latent, t, t_next, layers)
        calls += result.denoiser_calls
        for layer in layers:
            bundle.add(t, layer, result.captured[layer])
        latent = result.next_latent

    logger.debug(f"Captured {len(bundle)} feature entries with {calls} denoiser calls")
    return bundle
