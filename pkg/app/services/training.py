from typing import Callable, List, Optional, Protocol, Union

import torch
from tqdm import tqdm

from app.core.logger import get_logger
from app.models.fusion import FusionBlock
from app.models.encoder import count_parameters
from app.repository.datasets import SegmentationDataset
from app.repository.feature_cache import FeatureCache
from app.schemas.config import RunConfig, TrainMode
from app.schemas.segmentation import LossRecord
from app.services.baseline import BaselineTrainer
from app.services.diff_fusion import DiffusionFeatureExtractor
from app.services.diffusion import DiffusionModel
from app.services.ipkl_trainer import IPKLTrainer

logger = get_logger(__name__)

Trainer = Union[IPKLTrainer, BaselineTrainer]


class Predictor(Protocol):
    """Anything that maps one image (3, H, W) to a class map (H, W)"""

    def predict(self, image: torch.Tensor) -> torch.Tensor:
        ...


def fusion_parameter_count(model: DiffusionModel, config: RunConfig) -> int:
    extractor = DiffusionFeatureExtractor(model, config.trajectory)
    return count_parameters(FusionBlock(extractor.stacked_channels, config.fusion.out_channels))


def build_trainer(config: RunConfig, model: DiffusionModel, cache: Optional[FeatureCache] = None) -> Trainer:
    """Trainer for config.training.mode; the baseline encoder is matched to the fusion block's size"""
    if config.training.mode == TrainMode.BASELINE:
        return BaselineTrainer(config, fusion_parameter_count(model, config))
    return IPKLTrainer(model, config, cache)


def batch_order(size: int, steps: int, batch_size: int, seed: int) -> List[torch.Tensor]:
    """Index batches from seeded epoch permutations, reshuffled whenever an epoch runs out"""
    generator = torch.Generator().manual_seed(int(seed))
    batch_size = min(batch_size, size)
    batches, pool = [], torch.empty(0, dtype=torch.long)
    for _ in range(steps):
        if pool.numel() < batch_size:
            pool = torch.cat([pool, torch.randperm(size, generator=generator)])
        batches.append(pool[:batch_size])
        pool = pool[batch_size:]
    return batches


def run_training(
    trainer: Trainer,
    dataset: SegmentationDataset,
    config: RunConfig,
    on_eval: Optional[Callable[[Trainer], None]] = None
) -> List[LossRecord]:
    """
    Train for config.training.steps steps on one dataset

    Args:
        trainer: IPKL or baseline trainer
        dataset: Source-domain dataset
        config: Run configuration
        on_eval: Called every eval_every steps and once at the end

    Returns:
        One LossRecord per step
    """
    training = config.training
    records: List[LossRecord] = []
    batches = batch_order(len(dataset), training.steps, training.batch_size, config.seed)

    for index in tqdm(batches, desc=f"train {config.training.mode.value}", leave=False):
        record = trainer.train_step(dataset.images[index], dataset.labels[index])
        records.append(record)
        if record.step % training.log_every == 0:
            logger.info(
                f"step {record.step}: l_final={record.l_final:.4f} "
                f"l_condit={record.l_condit:.4f} l_consis={record.l_consis:.4f}"
            )
        if on_eval is not None and (record.step + 1) % training.eval_every == 0:
            on_eval(trainer)

    if on_eval is not None and training.steps % training.eval_every != 0:
        on_eval(trainer)
    return records


def restore_trainer(config: RunConfig, model: DiffusionModel, state: dict,
                    cache: Optional[FeatureCache] = None) -> Trainer:
    trainer = build_trainer(config, model, cache)
    trainer.load_state_dict(state)
    return trainer
