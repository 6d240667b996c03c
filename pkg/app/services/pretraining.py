from typing import List

import numpy as np
import torch
from tqdm import tqdm

from app.core.exceptions import ParameterException
from app.core.logger import get_logger
from app.repository.datasets import SegmentationDataset, captions_from_labels
from app.schemas.config import PretrainConfig
from app.schemas.training import PretrainResult
from app.services.diffusion import DiffusionModel, PretrainBatch, pretrain_step
from app.services.training import batch_order

logger = get_logger(__name__)


def moving_average(losses: List[float], window: int) -> List[float]:
    """Running mean over `window` steps; entry k averages steps k .. k + window - 1"""
    if len(losses) < window:
        return []
    kernel = np.full(window, 1.0 / window)
    return np.convolve(np.asarray(losses, dtype=np.float64), kernel, mode="valid").tolist()


def trend_is_monotone(averages: List[float], window: int) -> bool:
    """Running averages sampled once per window never increase"""
    samples = averages[::window]
    return all(b <= a for a, b in zip(samples, samples[1:]))


def pretrain(model: DiffusionModel, dataset: SegmentationDataset, config: PretrainConfig, seed: int) -> PretrainResult:
    """
    Train the denoiser and condition embedder on captioned images, then freeze them

    Captions are the names of the classes present in each label map. The
    loss curve is deterministic given the seed and the model's initial weights.
    """
    if len(dataset) == 0:
        raise ParameterException("Pretraining dataset is empty")
    model.require_initialized()
    model.unfreeze()
    optimizer = torch.optim.AdamW(list(model.parameters()), lr=config.lr, weight_decay=config.weight_decay)
    captions = captions_from_labels(dataset.labels, dataset.class_names, dataset.ignore_index)

    losses: List[float] = []
    batches = batch_order(len(dataset), config.steps, config.batch_size, seed)
    for step, index in enumerate(tqdm(batches, desc="pretrain", leave=False)):
        batch = PretrainBatch(images=dataset.images[index], captions=[captions[i] for i in index.tolist()])
        loss = pretrain_step(model, optimizer, batch, rng_seed=seed * 1_000_003 + step,
                             condition_dropout=config.condition_dropout)
        losses.append(loss)
        if step % config.log_every == 0:
            logger.info(f"pretrain step {step}: loss={loss:.5f}")

    model.freeze()
    window = config.moving_average_window
    averages = moving_average(losses, window)
    monotone = trend_is_monotone(averages, window)
    if averages and not monotone:
        logger.warning(f"Pretraining {window}-step running loss is not monotone: {averages[::window]}")
    elif averages:
        logger.info(f"Pretraining {window}-step running loss decreases: {averages[0]:.5f} -> {averages[-1]:.5f}")

    return PretrainResult(losses=losses, window=window, moving_average=averages, monotone=monotone)
