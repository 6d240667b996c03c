from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from app.core.exceptions import ParameterException, ShapeException, StateException
from app.core.logger import get_logger
from app.models.condition import ConditionEmbedder
from app.models.unet import ConditionalUNet
from app.schemas.config import ConditionConfig, ScheduleConfig, UNetConfig
from app.schemas.diffusion import ConditionEmbedding, DenoiserOutput, LatentImage, Schedule
from app.utils.hashing import module_checksum

logger = get_logger(__name__)


def make_noise_schedule(T_train: int, beta_start: float, beta_end: float) -> Schedule:
    """
    Build a linear beta schedule and its cumulative alpha products

    Args:
        T_train: Number of training timesteps (at least 2)
        beta_start: First beta, in (0, 1)
        beta_end: Last beta, in [beta_start, 1)

    Returns:
        Schedule with float64 coefficients

    Raises:
        ParameterException: If the range or step count is invalid
    """
    if T_train < 2:
        raise ParameterException(f"T_train must be at least 2, got {T_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterException(
            f"Expected 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )

    betas = torch.linspace(beta_start, beta_end, T_train, dtype=torch.float64)
    alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
    return Schedule(
        T_train=T_train,
        betas=betas,
        alphas_cumprod=alphas_cumprod,
        beta_start=beta_start,
        beta_end=beta_end,
    )


def schedule_from_config(config: ScheduleConfig) -> Schedule:
    return make_noise_schedule(config.T_train, config.beta_start, config.beta_end)


def _check_timestep(t: int, sched: Schedule, name: str = "t") -> None:
    if not sched.contains(int(t)):
        raise ParameterException(f"{name}={t} is outside the schedule [0, {sched.T_train})")


def q_sample(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, sched: Schedule) -> torch.Tensor:
    """Batched forward noising with one timestep per item; t has shape (B,)"""
    a = sched.alphas_cumprod.to(x0.dtype)[t].view(-1, *([1] * (x0.dim() - 1)))
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def add_noise(x0: LatentImage, eps: torch.Tensor, t: int, sched: Schedule) -> LatentImage:
    """Return sqrt(a_t) * x0 + sqrt(1 - a_t) * eps at timestep t"""
    if eps.shape != x0.data.shape:
        raise ShapeException(f"Noise shape {tuple(eps.shape)} does not match latent shape {tuple(x0.data.shape)}")
    _check_timestep(t, sched)

    a = sched.alpha_bar(t)
    noised = a.sqrt() * x0.data.double() + (1.0 - a).sqrt() * eps.double()
    return LatentImage(data=noised.to(x0.data.dtype), timestep=int(t))


def _ddim_transfer(x: torch.Tensor, eps_hat: torch.Tensor, a_from: torch.Tensor, a_to: torch.Tensor) -> torch.Tensor:
    x64, e64 = x.double(), eps_hat.double()
    x0_hat = (x64 - (1.0 - a_from).sqrt() * e64) / a_from.sqrt()
    return (a_to.sqrt() * x0_hat + (1.0 - a_to).sqrt() * e64).to(x.dtype)


def ddim_invert_step(x_t: LatentImage, eps_hat: torch.Tensor, t: int, t_next: int, sched: Schedule) -> LatentImage:
    """
    Deterministic DDIM inversion step from t to a later timestep t_next

    Args:
        x_t: Latent at timestep t
        eps_hat: Noise predicted at t
        t: Current timestep
        t_next: Target timestep, t_next >= t
        sched: Noise schedule

    Returns:
        Latent at timestep t_next

    Raises:
        ParameterException: If t_next < t or either timestep is outside the schedule
        ShapeException: If eps_hat and x_t shapes differ
    """
    _check_timestep(t, sched)
    _check_timestep(t_next, sched, "t_next")
    if t_next < t:
        raise ParameterException(f"Inversion must move forward in time, got t={t}, t_next={t_next}")
    if eps_hat.shape != x_t.data.shape:
        raise ShapeException(f"Noise shape {tuple(eps_hat.shape)} does not match latent shape {tuple(x_t.data.shape)}")

    data = _ddim_transfer(x_t.data, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_next))
    return LatentImage(data=data, timestep=int(t_next))


def ddim_denoise_step(x_t: LatentImage, eps_hat: torch.Tensor, t: int, t_prev: int, sched: Schedule) -> LatentImage:
    """Deterministic (eta = 0) DDIM denoising step from t back to t_prev <= t"""
    _check_timestep(t, sched)
    _check_timestep(t_prev, sched, "t_prev")
    if t_prev > t:
        raise ParameterException(f"Denoising must move backward in time, got t={t}, t_prev={t_prev}")
    if eps_hat.shape != x_t.data.shape:
        raise ShapeException(f"Noise shape {tuple(eps_hat.shape)} does not match latent shape {tuple(x_t.data.shape)}")

    data = _ddim_transfer(x_t.data, eps_hat, sched.alpha_bar(t), sched.alpha_bar(t_prev))
    return LatentImage(data=data, timestep=int(t_prev))


@dataclass
class PretrainBatch:
    """Images (B, C, H, W) in [-1, 1] with one caption category list per image"""
    images: torch.Tensor
    captions: List[List[str]]


class DiffusionModel:
    """
    The toy text-to-image prior: conditional U-Net, condition embedder and schedule

    Weights are written only by pretrain_step; every other method is read-only
    and may be called from several threads once the model is frozen.
    """

    def __init__(
        self,
        unet_config: UNetConfig,
        condition_config: ConditionConfig,
        schedule_config: ScheduleConfig,
        vocabulary: Sequence[str]
    ):
        self.unet_config = unet_config
        self.condition_config = condition_config
        self.schedule_config = schedule_config
        self.vocabulary = list(vocabulary)
        self.schedule = schedule_from_config(schedule_config)
        self.embedder = ConditionEmbedder(self.vocabulary, condition_config.tokens, condition_config.embed_dim)
        self.unet = ConditionalUNet(unet_config, condition_config.embed_dim)
        self.initialized = False

    @classmethod
    def create(
        cls,
        unet_config: UNetConfig,
        condition_config: ConditionConfig,
        schedule_config: ScheduleConfig,
        vocabulary: Sequence[str],
        seed: int
    ) -> "DiffusionModel":
        """Construct with weights drawn from a seeded generator, leaving the global RNG untouched"""
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = cls(unet_config, condition_config, schedule_config, vocabulary)
        model.initialized = True
        logger.info(
            f"Diffusion model created: {sum(p.numel() for p in model.parameters())} parameters, "
            f"{model.unet.num_decoder_layers} decoder layers"
        )
        return model

    def parameters(self):
        yield from self.unet.parameters()
        yield from self.embedder.parameters()

    def state_dict(self) -> dict:
        return {"unet": self.unet.state_dict(), "embedder": self.embedder.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.unet.load_state_dict(state["unet"])
        self.embedder.load_state_dict(state["embedder"])
        self.initialized = True

    @property
    def num_tokens(self) -> int:
        return self.condition_config.tokens

    @property
    def num_decoder_layers(self) -> int:
        return self.unet.num_decoder_layers

    def freeze(self) -> "DiffusionModel":
        """Exempt every denoiser and embedder weight from gradients"""
        for p in self.parameters():
            p.requires_grad_(False)
        self.unet.eval()
        self.embedder.eval()
        return self

    def unfreeze(self) -> "DiffusionModel":
        for p in self.parameters():
            p.requires_grad_(True)
        self.unet.train()
        self.embedder.train()
        return self

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def checksums(self) -> dict:
        return {"denoiser": module_checksum(self.unet), "condition_embedder": module_checksum(self.embedder)}

    def require_initialized(self) -> None:
        if not self.initialized:
            raise StateException("Diffusion model has no weights; create it with a seed or load a checkpoint")

    def embed_condition(self, categories: Optional[Sequence[str]]) -> ConditionEmbedding:
        """
        Embed a category prompt as K padded tokens

        Args:
            categories: Category names from the vocabulary, or None / empty for the null condition

        Returns:
            ConditionEmbedding with tokens of shape (K, d_cond)

        Raises:
            VocabularyException: If a name is not in the vocabulary
        """
        self.require_initialized()
        ids = self.embedder.token_ids(categories)
        with torch.no_grad():
            tokens = self.embedder(ids)
        return ConditionEmbedding(tokens=tokens, is_null=not categories, categories=tuple(categories or ()))

    def predict_noise(
        self,
        x_t: LatentImage,
        t: int,
        cond: ConditionEmbedding,
        capture: Union[bool, Iterable[int]] = False
    ) -> DenoiserOutput:
        """
        Apply the denoiser once to a single latent

        Args:
            x_t: Latent of shape (C, H, W) at timestep t
            t: Timestep to query
            cond: Condition embedding
            capture: True for every decoder layer, or an iterable of layer indices

        Returns:
            DenoiserOutput with eps_hat shaped like x_t.data and optional per-layer captures

        Raises:
            StateException: If the model has no weights
            ParameterException: If t is outside the schedule or does not match x_t
        """
        self.require_initialized()
        _check_timestep(t, self.schedule)
        if x_t.timestep != t:
            raise ParameterException(f"Latent is at timestep {x_t.timestep} but the denoiser was queried at {t}")

        if capture is True:
            layers = set(range(self.num_decoder_layers))
        elif capture is False:
            layers = None
        else:
            layers = set(capture)

        with torch.no_grad():
            eps, captured = self.unet(
                x_t.data.unsqueeze(0),
                torch.tensor([t], dtype=torch.long),
                cond.tokens.unsqueeze(0),
                capture_layers=layers,
            )

        if captured is not None:
            for pair in captured.values():
                pair.inter = pair.inter[0]
                pair.cross = pair.cross[0]
        return DenoiserOutput(eps_hat=eps[0], captured=captured)


def pretrain_step(
    model: DiffusionModel,
    optimizer: torch.optim.Optimizer,
    batch: PretrainBatch,
    rng_seed: int,
    condition_dropout: float = 0.1
) -> float:
    """
    One epsilon-prediction update on a batch of captioned images

    Args:
        model: Unfrozen diffusion model
        optimizer: Optimizer over model.parameters()
        batch: Images and caption category lists
        rng_seed: Seed for timesteps, noise and caption dropout
        condition_dropout: Probability of replacing a caption by the null condition

    Returns:
        Mean squared error between sampled and predicted noise

    Raises:
        ParameterException: If the batch is empty or captions do not match images
        StateException: If the model is frozen or uninitialized
    """
    images = batch.images
    if images.shape[0] == 0:
        raise ParameterException("Pretraining batch is empty")
    if len(batch.captions) != images.shape[0]:
        raise ParameterException(f"{images.shape[0]} images but {len(batch.captions)} captions")
    model.require_initialized()
    if model.is_frozen:
        raise StateException("Cannot pretrain a frozen diffusion model")

    generator = torch.Generator().manual_seed(int(rng_seed))
    size = images.shape[0]
    t = torch.randint(0, model.schedule.T_train, (size,), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    dropped = torch.rand(size, generator=generator) < condition_dropout

    ids = torch.stack([
        model.embedder.token_ids(None if dropped[i] else batch.captions[i]) for i in range(size)
    ])
    context = model.embedder(ids)
    x_t = q_sample(images, eps, t, model.schedule)
    eps_hat, _ = model.unet(x_t, t, context)
    loss = F.mse_loss(eps_hat, eps)

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()
