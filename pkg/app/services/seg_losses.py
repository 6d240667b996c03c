import math
from typing import NamedTuple, Tuple

import torch
import torch.nn.functional as F

from app.core.exceptions import NumericException, ParameterException, ShapeException
from app.core.logger import get_logger
from app.models.seg_head import SegmentationHead
from app.schemas.config import ConsistencyKind
from app.schemas.features import FusedFeature
from app.schemas.segmentation import LossRecord, SegmentationLogits

logger = get_logger(__name__)


class ConditionalLoss(NamedTuple):
    loss: torch.Tensor
    all_ignored: bool


def seg_head_forward(f: FusedFeature, head: SegmentationHead, output_size: Tuple[int, int]) -> SegmentationLogits:
    """Run the segment head D and upsample logits to the image resolution"""
    batched = f.data.dim() == 4
    logits = head(f.data if batched else f.data.unsqueeze(0), output_size)
    return SegmentationLogits(data=logits if batched else logits[0])


def _batched(logits: torch.Tensor) -> torch.Tensor:
    return logits if logits.dim() == 4 else logits.unsqueeze(0)


def conditional_loss(logits: SegmentationLogits, labels: torch.Tensor, ignore_index: int = 255) -> ConditionalLoss:
    """
    Mean pixelwise cross-entropy over non-ignore pixels

    Args:
        logits: (cls, h, w) or (B, cls, h, w)
        labels: (h, w) or (B, h, w) class indices with ignore_index

    Returns:
        ConditionalLoss; when every pixel is ignore the loss is 0 and all_ignored is set
    """
    scores = _batched(logits.data)
    targets = labels if labels.dim() == 3 else labels.unsqueeze(0)
    if scores.shape[0] != targets.shape[0] or scores.shape[-2:] != targets.shape[-2:]:
        raise ShapeException(f"Logits {tuple(scores.shape)} do not match labels {tuple(targets.shape)}")

    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        logger.warning("Every label pixel is ignore; conditional loss defined as 0")
        return ConditionalLoss(loss=scores.sum() * 0.0, all_ignored=True)

    total = F.cross_entropy(scores, targets.long(), ignore_index=ignore_index, reduction="sum")
    return ConditionalLoss(loss=total / count, all_ignored=False)


def consistency_loss(
    logits_con: SegmentationLogits,
    logits_uncon: SegmentationLogits,
    kind: ConsistencyKind = ConsistencyKind.L2
) -> torch.Tensor:
    """
    Consistency between the conditional teacher and the unconditional student

    The teacher logits are detached, so no gradient reaches the conditional branch.

    Args:
        logits_con: Teacher logits
        logits_uncon: Student logits
        kind: L2 (mean squared logit difference) or KL (mean pixelwise KL(teacher || student))

    Returns:
        Scalar loss tensor
    """
    if logits_con.data.shape != logits_uncon.data.shape:
        raise ShapeException(
            f"Teacher logits {tuple(logits_con.data.shape)} and student logits "
            f"{tuple(logits_uncon.data.shape)} differ in shape"
        )
    teacher = _batched(logits_con.data).detach()
    student = _batched(logits_uncon.data)

    if kind == ConsistencyKind.L2:
        return F.mse_loss(student, teacher)
    if kind == ConsistencyKind.KL:
        per_pixel = F.kl_div(
            F.log_softmax(student, dim=1),
            F.log_softmax(teacher, dim=1),
            reduction="none",
            log_target=True,
        ).sum(dim=1)
        return per_pixel.mean()
    raise ParameterException(f"No consistency objective for kind '{kind.value}'")


def total_loss(l_condit: float, l_consis: float, lambda1: float = 1.0, lambda2: float = 1.0, step: int = 0,
               degenerate: bool = False) -> LossRecord:
    """L_final = lambda1 * L_condit + lambda2 * L_consis"""
    values = {"l_condit": l_condit, "l_consis": l_consis, "lambda1": lambda1, "lambda2": lambda2}
    bad = [name for name, value in values.items() if not math.isfinite(value)]
    if bad:
        raise NumericException(f"Non-finite loss inputs: {', '.join(bad)}", errors=bad)

    return LossRecord(
        l_condit=l_condit,
        l_consis=l_consis,
        l_final=lambda1 * l_condit + lambda2 * l_consis,
        lambda1=lambda1,
        lambda2=lambda2,
        step=step,
        degenerate=degenerate,
    )
