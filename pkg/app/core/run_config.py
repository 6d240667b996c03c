import copy
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import ValidationError

from app.core.exceptions import ConfigurationException, NotFoundException
from app.core.logger import get_logger
from app.schemas.config import RunConfig
from app.utils.error_formatters import transform_validation_errors

logger = get_logger(__name__)


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def expand_dotted(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn {"training.lambda2": 0.0} into {"training": {"lambda2": 0.0}}"""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def load_run_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional JSON file and flag overrides

    Precedence is defaults < config file < overrides.

    Args:
        config_path: Optional path to a JSON config file
        overrides: Dotted-key overrides, typically from command-line flags

    Returns:
        Validated RunConfig

    Raises:
        NotFoundException: If the config file does not exist
        ConfigurationException: If the merged configuration is invalid
    """
    layered = RunConfig().model_dump(mode="json")

    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise NotFoundException(f"Config file not found: {config_path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationException("Config file is not valid JSON", errors=str(e))
        if not isinstance(file_values, dict):
            raise ConfigurationException("Config file must contain a JSON object")
        layered = _deep_merge(layered, file_values)

    if overrides:
        layered = _deep_merge(layered, expand_dotted(overrides))

    try:
        run_config = RunConfig.model_validate(layered)
    except ValidationError as e:
        raise ConfigurationException(errors=transform_validation_errors(e.errors()))

    logger.debug(f"Run config resolved with hash {run_config.config_hash()}")
    return run_config


def apply_overrides(run_config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Copy of run_config with dotted-key overrides applied and revalidated"""
    layered = _deep_merge(run_config.model_dump(mode="json"), expand_dotted(overrides))
    try:
        return RunConfig.model_validate(layered)
    except ValidationError as e:
        raise ConfigurationException(errors=transform_validation_errors(e.errors()))
