import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Tuple

import torch

from app.core.exceptions import CheckpointException, NotFoundException, StorageException
from app.core.logger import get_logger
from app.schemas.config import ConditionConfig, RunConfig, ScheduleConfig, UNetConfig
from app.services.diffusion import DiffusionModel

logger = get_logger(__name__)

FORMAT_VERSION = 1
DIFFUSION_KIND = "diffusion"
TRAINER_KIND = "trainer"


def _save(payload: Dict[str, Any], path: str) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix="tmp-", suffix=".pt")
    except OSError as e:
        raise StorageException(f"Cannot write checkpoint {path}", errors=str(e))
    try:
        # torch.save names the archive after the file; hand it an open handle
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp, target)
    except (OSError, RuntimeError) as e:
        raise StorageException(f"Cannot write checkpoint {path}", errors=str(e))
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return target


def _load(path: str, kind: str) -> Dict[str, Any]:
    source = Path(path)
    if not source.is_file():
        raise NotFoundException(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointException(f"Cannot read checkpoint {path}", errors=str(e))

    if not isinstance(payload, dict) or payload.get("kind") != kind:
        raise CheckpointException(f"{path} is not a {kind} checkpoint")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointException(
            f"Checkpoint format version {payload.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    return payload


def diffusion_payload(model: DiffusionModel, config_hash: str) -> Dict[str, Any]:
    return {
        "kind": DIFFUSION_KIND,
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "vocabulary": list(model.vocabulary),
        "unet": model.unet_config.model_dump(mode="json"),
        "condition": model.condition_config.model_dump(mode="json"),
        "schedule": model.schedule_config.model_dump(mode="json"),
        "weights": model.state_dict(),
    }


def model_from_payload(payload: Dict[str, Any]) -> DiffusionModel:
    try:
        model = DiffusionModel(
            UNetConfig.model_validate(payload["unet"]),
            ConditionConfig.model_validate(payload["condition"]),
            ScheduleConfig.model_validate(payload["schedule"]),
            payload["vocabulary"],
        )
        model.load_state_dict(payload["weights"])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointException("Checkpoint weights do not match its recorded architecture", errors=str(e))
    return model.freeze()


def save_diffusion_checkpoint(model: DiffusionModel, path: str, config_hash: str) -> Path:
    """Weights, schedule, vocabulary and architecture of a pretrained diffusion model"""
    model.require_initialized()
    target = _save(diffusion_payload(model, config_hash), path)
    logger.info(f"Diffusion checkpoint written to {target}")
    return target


def load_diffusion_checkpoint(path: str) -> Tuple[DiffusionModel, str]:
    """
    Rebuild a frozen diffusion model from a checkpoint

    Returns:
        (model, config hash of the run that produced it)

    Raises:
        NotFoundException: If the file does not exist
        CheckpointException: On format-version mismatch or unreadable contents
    """
    payload = _load(path, DIFFUSION_KIND)
    return model_from_payload(payload), payload["config_hash"]


def save_trainer_checkpoint(trainer, model: DiffusionModel, config: RunConfig, path: str) -> Path:
    """Trainer archive: embedded diffusion checkpoint, trainer state and the run config"""
    payload = {
        "kind": TRAINER_KIND,
        "format_version": FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "run_config": config.canonical_json(),
        "mode": config.training.mode.value,
        "diffusion": diffusion_payload(model, config.config_hash()),
        "trainer": trainer.state_dict(),
    }
    target = _save(payload, path)
    logger.info(f"Trainer checkpoint at step {payload['trainer']['step']} written to {target}")
    return target


def load_trainer_checkpoint(path: str) -> Tuple[RunConfig, DiffusionModel, Dict[str, Any]]:
    """
    Returns:
        (run config, frozen diffusion model, trainer state dict)
    """
    payload = _load(path, TRAINER_KIND)
    diffusion = payload.get("diffusion")
    if not isinstance(diffusion, dict) or diffusion.get("format_version") != FORMAT_VERSION:
        raise CheckpointException("Trainer checkpoint has no compatible embedded diffusion checkpoint")
    try:
        config = RunConfig.model_validate_json(payload["run_config"])
    except ValueError as e:
        raise CheckpointException("Trainer checkpoint carries an invalid run config", errors=str(e))
    return config, model_from_payload(diffusion), payload["trainer"]
