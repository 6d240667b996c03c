from typing import Optional

import torch
from torch.optim.lr_scheduler import LambdaLR

from app.core.exceptions import CheckpointException, ShapeException
from app.core.logger import get_logger
from app.models.encoder import PlainEncoder, count_parameters
from app.models.seg_head import SegmentationHead
from app.schemas.config import RunConfig
from app.schemas.segmentation import LossRecord, SegmentationLogits
from app.schemas.training import FreezeReport, GradientReport
from app.services.ipkl_trainer import flip_batch, group_norm, step_generator, warmup_schedule
from app.services.seg_losses import conditional_loss, total_loss

logger = get_logger(__name__)


class BaselineTrainer:
    """Segmentation head on a plain convolutional encoder; no diffusion features"""

    mode = "baseline"

    def __init__(self, config: RunConfig, target_parameters: int):
        self.config = config
        self.class_names = list(config.data.class_names)
        self.ignore_index = config.data.ignore_index
        self.seed = config.seed
        self.step = 0

        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.encoder = PlainEncoder.matched(3, config.fusion.out_channels, target_parameters)
            self.head = SegmentationHead(config.fusion.out_channels, len(self.class_names), config.head.hidden_channels)

        training = config.training
        self.optimizer = torch.optim.AdamW(
            list(self.encoder.parameters()) + list(self.head.parameters()),
            lr=training.lr,
            weight_decay=training.weight_decay,
        )
        self.scheduler = LambdaLR(self.optimizer, warmup_schedule(training.warmup_steps))
        self.last_gradients: Optional[GradientReport] = None
        logger.info(
            f"Baseline encoder width {self.encoder.width}: {count_parameters(self.encoder)} parameters "
            f"for a target of {target_parameters}"
        )

    def _logits(self, images: torch.Tensor) -> SegmentationLogits:
        return SegmentationLogits(data=self.head(self.encoder(images), tuple(images.shape[-2:])))

    def train_step(self, images: torch.Tensor, labels: torch.Tensor) -> LossRecord:
        if images.dim() != 4 or labels.dim() != 3 or images.shape[0] != labels.shape[0]:
            raise ShapeException(f"Batch images {tuple(images.shape)} and labels {tuple(labels.shape)} do not pair up")

        training = self.config.training
        if training.hflip:
            images, labels = flip_batch(images, labels, step_generator(self.seed, self.step))
        condit = conditional_loss(self._logits(images), labels, self.ignore_index)
        loss = training.lambda1 * condit.loss

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.last_gradients = self.gradient_norms()
        self.optimizer.step()
        self.scheduler.step()

        record = total_loss(
            float(condit.loss.detach()),
            0.0,
            lambda1=training.lambda1,
            lambda2=training.lambda2,
            step=self.step,
            degenerate=condit.all_ignored,
        )
        self.step += 1
        return record

    def predict(self, image: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            logits = self._logits(image.unsqueeze(0))
        return logits.data[0].argmax(dim=0)

    def freeze_check(self) -> FreezeReport:
        # nothing is frozen
        return FreezeReport(step=self.step, groups={})

    def gradient_norms(self) -> GradientReport:
        norms = {"encoder": group_norm(self.encoder.parameters()), "head": group_norm(self.head.parameters())}
        return GradientReport(step=self.step, norms=norms)

    def state_dict(self) -> dict:
        return {
            "trainable": {"encoder": self.encoder.state_dict(), "head": self.head.state_dict()},
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "step": self.step,
            "seed": self.seed,
            "encoder_width": self.encoder.width,
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("encoder_width", self.encoder.width) != self.encoder.width:
            raise CheckpointException(
                f"Checkpoint encoder width {state['encoder_width']} differs from the matched width {self.encoder.width}"
            )
        self.encoder.load_state_dict(state["trainable"]["encoder"])
        self.head.load_state_dict(state["trainable"]["head"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.step = int(state["step"])
        self.seed = int(state["seed"])
