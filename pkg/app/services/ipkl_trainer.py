from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
from torch.optim.lr_scheduler import LambdaLR

from app.core.exceptions import ParameterException, ShapeException, StateException
from app.core.logger import get_logger
from app.models.fusion import FusionBlock
from app.models.seg_head import SegmentationHead
from app.repository.feature_cache import FeatureCache
from app.schemas.config import ConsistencyKind, RunConfig, TrainMode
from app.schemas.segmentation import LossRecord, MaskSet, SegmentationLogits
from app.schemas.training import FreezeReport, GradientReport
from app.services.diff_fusion import DiffusionFeatureExtractor, fuse
from app.services.diffusion import DiffusionModel
from app.services.path_control import decompose_annotation
from app.services.seg_losses import conditional_loss, consistency_loss, seg_head_forward, total_loss

logger = get_logger(__name__)

FROZEN_GROUPS = ("denoiser", "condition_embedder")
TRAINABLE_GROUPS = ("fusion", "head")


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def flip_batch(images: torch.Tensor, labels: torch.Tensor, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Random horizontal flip per image, applied identically to image and label map"""
    flips = torch.rand(images.shape[0], generator=generator) < 0.5
    images = torch.where(flips[:, None, None, None], images.flip(-1), images)
    labels = torch.where(flips[:, None, None], labels.flip(-1), labels)
    return images, labels


def warmup_schedule(warmup_steps: int):
    def factor(step: int) -> float:
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, (step + 1) / warmup_steps)
    return factor


def group_norm(parameters) -> float:
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return total ** 0.5


@dataclass
class TrainState:
    """
    Everything one training loop owns

    fusion and head are the single copy of the trainable weights; the
    conditional and unconditional branches both read them.
    """
    fusion: FusionBlock
    head: SegmentationHead
    optimizer: torch.optim.Optimizer
    scheduler: LambdaLR
    frozen_checksums: Dict[str, str]
    seed: int = 0
    step: int = 0
    last_gradients: Optional[GradientReport] = field(default=None)

    def trainable_parameters(self) -> List[torch.nn.Parameter]:
        return list(self.fusion.parameters()) + list(self.head.parameters())


class IPKLTrainer:
    """
    Dual-branch segmentation trainer over a frozen diffusion backbone

    In ipkl mode the conditional branch sees the label-derived masks and is
    trained with cross-entropy, and the unconditional branch learns from it
    through the consistency term. In diff_only mode only the unconditional
    branch exists and it is trained with cross-entropy directly. Prediction
    always uses the unconditional branch.
    """

    def __init__(self, model: DiffusionModel, config: RunConfig, cache: Optional[FeatureCache] = None):
        if config.training.mode == TrainMode.BASELINE:
            raise ParameterException("The baseline arm is trained by BaselineTrainer")
        model.require_initialized()
        self.model = model.freeze()
        self.config = config
        self.mode = config.training.mode
        self.class_names = list(config.data.class_names)
        self.ignore_index = config.data.ignore_index
        self.extractor = DiffusionFeatureExtractor(model, config.trajectory, cache)

        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            fusion = FusionBlock(self.extractor.stacked_channels, config.fusion.out_channels)
            head = SegmentationHead(config.fusion.out_channels, len(self.class_names), config.head.hidden_channels)

        training = config.training
        optimizer = torch.optim.AdamW(
            list(fusion.parameters()) + list(head.parameters()), lr=training.lr, weight_decay=training.weight_decay
        )
        self.state = TrainState(
            fusion=fusion,
            head=head,
            optimizer=optimizer,
            scheduler=LambdaLR(optimizer, warmup_schedule(training.warmup_steps)),
            frozen_checksums=model.checksums(),
            seed=config.seed,
        )
        logger.info(
            f"Trainer ready: mode={self.mode.value}, stacked channels={self.extractor.stacked_channels}, "
            f"trainable parameters={sum(p.numel() for p in self.state.trainable_parameters())}"
        )

    @property
    def step(self) -> int:
        return self.state.step

    def branch(self, kind: str) -> Tuple[FusionBlock, SegmentationHead]:
        """Modules of the "conditional" or "unconditional" branch; both are the same objects"""
        if kind not in ("conditional", "unconditional"):
            raise ParameterException(f"Unknown branch '{kind}'")
        return self.state.fusion, self.state.head

    def _logits(self, stacked: torch.Tensor, output_size: Tuple[int, int]) -> SegmentationLogits:
        fused = fuse(stacked, self.state.fusion)
        return seg_head_forward(fused, self.state.head, output_size)

    def train_step(self, images: torch.Tensor, labels: torch.Tensor) -> LossRecord:
        """
        One joint update of the shared fusion block and head

        Args:
            images: (B, 3, H, W) in [-1, 1]
            labels: (B, H, W) class indices with ignore_index

        Returns:
            LossRecord of this step

        Raises:
            ShapeException: If images and labels disagree
            DataException: If a label is outside the class range
            StateException: If a frozen weight changed (checked every freeze_check_every steps)
        """
        if images.dim() != 4 or labels.dim() != 3 or images.shape[0] != labels.shape[0]:
            raise ShapeException(f"Batch images {tuple(images.shape)} and labels {tuple(labels.shape)} do not pair up")
        if images.shape[-2:] != labels.shape[-2:]:
            raise ShapeException("Images and labels differ in resolution")

        training = self.config.training
        if training.hflip:
            images, labels = flip_batch(images, labels, step_generator(self.state.seed, self.state.step))
        output_size = tuple(images.shape[-2:])
        kind = training.consistency
        lambda1, lambda2 = training.lambda1, training.lambda2

        logits_uncon = self._logits(self.extractor.stacked_batch(images), output_size)

        if self.mode == TrainMode.IPKL:
            masksets: List[Optional[MaskSet]] = [
                decompose_annotation(label, self.class_names, self.ignore_index) for label in labels
            ]
            logits_con = self._logits(self.extractor.stacked_batch(images, masksets), output_size)
            condit = conditional_loss(logits_con, labels, self.ignore_index)

            if kind == ConsistencyKind.NONE:
                consis = torch.zeros(())
                loss = lambda1 * condit.loss
            elif lambda2 == 0.0:
                with torch.no_grad():
                    consis = consistency_loss(logits_con, logits_uncon, kind)
                loss = lambda1 * condit.loss
            else:
                consis = consistency_loss(logits_con, logits_uncon, kind)
                loss = lambda1 * condit.loss + lambda2 * consis
        else:
            condit = conditional_loss(logits_uncon, labels, self.ignore_index)
            consis = torch.zeros(())
            loss = lambda1 * condit.loss

        self.state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.state.last_gradients = self.gradient_norms()
        self.state.optimizer.step()
        self.state.scheduler.step()

        record = total_loss(
            float(condit.loss.detach()),
            # KL can come out a hair below zero in float32
            max(0.0, float(consis.detach())),
            lambda1=lambda1,
            lambda2=lambda2,
            step=self.state.step,
            degenerate=condit.all_ignored,
        )
        self.state.step += 1

        if self.state.step % training.freeze_check_every == 0:
            report = self.freeze_check()
            if not report.passed:
                raise StateException(
                    f"Frozen weights changed during training at step {self.state.step}",
                    errors=report.failed_groups,
                )
        return record

    def predict(self, image: torch.Tensor) -> torch.Tensor:
        """Class map (H, W) from the unconditional branch; reads nothing but the image"""
        with torch.no_grad():
            logits = self._logits(self.extractor.stacked(image), tuple(image.shape[-2:]))
        return logits.data.argmax(dim=0)

    def predict_with_reference(self, image: torch.Tensor, maskset: MaskSet) -> torch.Tensor:
        """Class map from the conditional branch given reference masks; diagnostic only"""
        with torch.no_grad():
            logits = self._logits(self.extractor.stacked(image, maskset), tuple(image.shape[-2:]))
        return logits.data.argmax(dim=0)

    def freeze_check(self) -> FreezeReport:
        current = self.model.checksums()
        frozen = self.model.is_frozen
        groups = {name: frozen and current[name] == self.state.frozen_checksums[name] for name in FROZEN_GROUPS}
        report = FreezeReport(step=self.state.step, groups=groups)
        if not report.passed:
            logger.error(f"Freeze check failed at step {self.state.step}: {report.failed_groups}")
        return report

    def gradient_norms(self) -> GradientReport:
        norms = {
            "denoiser": group_norm(self.model.unet.parameters()),
            "condition_embedder": group_norm(self.model.embedder.parameters()),
            "fusion": group_norm(self.state.fusion.parameters()),
            "head": group_norm(self.state.head.parameters()),
        }
        return GradientReport(step=self.state.step, norms=norms, frozen_groups=list(FROZEN_GROUPS))

    def trainable_state_dict(self) -> dict:
        return {"fusion": self.state.fusion.state_dict(), "head": self.state.head.state_dict()}

    def state_dict(self) -> dict:
        return {
            "trainable": self.trainable_state_dict(),
            "optimizer": self.state.optimizer.state_dict(),
            "scheduler": self.state.scheduler.state_dict(),
            "step": self.state.step,
            "seed": self.state.seed,
        }

    def load_state_dict(self, state: dict) -> None:
        self.state.fusion.load_state_dict(state["trainable"]["fusion"])
        self.state.head.load_state_dict(state["trainable"]["head"])
        self.state.optimizer.load_state_dict(state["optimizer"])
        self.state.scheduler.load_state_dict(state["scheduler"])
        self.state.step = int(state["step"])
        self.state.seed = int(state["seed"])
