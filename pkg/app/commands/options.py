from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from app.core.config import settings
from app.core.exceptions import CheckpointException, ParameterException
from app.core.logger import get_logger
from app.core.run_config import apply_overrides, load_run_config
from app.repository.datasets import SegmentationDataset
from app.repository.feature_cache import FeatureCache
from app.schemas.config import RunConfig
from app.services.diffusion import DiffusionModel

logger = get_logger(__name__)


def int_list(ctx, param, value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'")


def name_list(ctx, param, value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


COMMON_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                 help="JSON run config; flags override it"),
    click.option("--seed", type=int, default=None, help="Random seed"),
    click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory"),
    click.option("--data", "data_root", type=click.Path(file_okay=False), default=None, help="Dataset root"),
    click.option("--steps", type=str, default=None, callback=int_list, help="Trajectory timesteps, e.g. 1,334,667"),
    click.option("--layers", type=str, default=None, callback=int_list, help="Decoder layers to capture"),
    click.option("--consis", type=click.Choice(["l2", "kl", "none"]), default=None, help="Consistency objective"),
    click.option("--lambda1", type=float, default=None, help="Weight of the conditional loss"),
    click.option("--lambda2", type=float, default=None, help="Weight of the consistency loss"),
]

COMMON_KEYS = {
    "seed": "seed",
    "out_dir": "output_dir",
    "data_root": "data.root",
    "steps": "trajectory.steps",
    "layers": "trajectory.layers",
    "consis": "training.consistency",
    "lambda1": "training.lambda1",
    "lambda2": "training.lambda2",
}


def run_options(func):
    for option in reversed(COMMON_OPTIONS):
        func = option(func)
    return func


def resolve_config(common: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < --config file < common flags < command-specific flags"""
    overrides = {COMMON_KEYS[name]: value for name, value in common.items() if name in COMMON_KEYS and value is not None}
    overrides.update({key: value for key, value in (extra or {}).items() if value is not None})
    return load_run_config(common.get("config_path"), overrides)


def align_with_checkpoint(config: RunConfig, model: DiffusionModel) -> RunConfig:
    """Adopt the checkpoint's architecture sections so the config hash describes the model in use"""
    if list(model.vocabulary) != list(config.data.class_names):
        raise CheckpointException(
            f"Checkpoint vocabulary {model.vocabulary} does not match class names {config.data.class_names}"
        )
    sections = {
        "unet": model.unet_config.model_dump(mode="json"),
        "condition": model.condition_config.model_dump(mode="json"),
        "schedule": model.schedule_config.model_dump(mode="json"),
    }
    current = {name: getattr(config, name).model_dump(mode="json") for name in sections}
    if current == sections:
        return config
    logger.warning("Run config architecture differs from the checkpoint; using the checkpoint's")
    return apply_overrides(config, sections)


def dataset_path(config: RunConfig, name: str) -> Path:
    return Path(config.data.root) / name


def load_dataset(config: RunConfig, name: str, max_images: Optional[int] = None) -> SegmentationDataset:
    return SegmentationDataset(str(dataset_path(config, name)), max_images=max_images)


def open_cache(directory: Optional[str] = None, required: bool = False) -> Optional[FeatureCache]:
    directory = directory or settings.DIFFSEG_CACHE
    if not directory:
        if required:
            raise ParameterException("No feature cache directory: pass --cache or set DIFFSEG_CACHE")
        return None
    return FeatureCache(directory)
