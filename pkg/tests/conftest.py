import copy
import json
import os

os.environ.setdefault("TESTING", "1")

import pytest  # noqa: E402
import torch  # noqa: E402

from app.core.run_config import apply_overrides  # noqa: E402
from app.schemas.config import RunConfig  # noqa: E402
from app.services.dataset import generate_dataset, shipped_domains  # noqa: E402
from app.services.diffusion import DiffusionModel  # noqa: E402

TINY = {
    "seed": 0,
    "unet": {"base_width": 8, "channel_mults": [1, 2, 2], "num_res_blocks": 1, "attention_heads": 2},
    "condition": {"tokens": 8, "embed_dim": 16},
    "trajectory": {"steps": [1, 334]},
    "fusion": {"out_channels": 16},
    "head": {"hidden_channels": 16},
    "training": {
        "steps": 4, "batch_size": 2, "warmup_steps": 2, "freeze_check_every": 2,
        "eval_every": 2, "eval_images": 2, "log_every": 1,
    },
    "pretrain": {"steps": 4, "batch_size": 4, "moving_average_window": 2, "log_every": 1},
    "data": {"n_images": 6, "resolution": 16},
    "benchmark": {"max_images": 3},
}


def tiny_config_dict() -> dict:
    """Deep copy of the tiny run configuration used across the suite"""
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig.model_validate(tiny_config_dict())


@pytest.fixture
def config_factory():
    """Tiny RunConfig with dotted-key overrides, e.g. {"training.lambda2": 0.0}"""
    def factory(overrides: dict = None) -> RunConfig:
        config = RunConfig.model_validate(tiny_config_dict())
        return apply_overrides(config, overrides) if overrides else config
    return factory


@pytest.fixture
def make_model():
    """Factory for a freshly initialized (unfrozen) tiny diffusion model"""
    def factory(seed: int = 0) -> DiffusionModel:
        config = RunConfig.model_validate(tiny_config_dict())
        return DiffusionModel.create(config.unet, config.condition, config.schedule, config.data.class_names, seed)
    return factory


@pytest.fixture(scope="session")
def frozen_model() -> DiffusionModel:
    """Shared frozen tiny model; tests must not modify its weights"""
    config = RunConfig.model_validate(tiny_config_dict())
    model = DiffusionModel.create(config.unet, config.condition, config.schedule, config.data.class_names, 0)
    return model.freeze()


@pytest.fixture(scope="session")
def data_root(tmp_path_factory) -> str:
    """Three generated 16x16 domains with six images each"""
    root = tmp_path_factory.mktemp("data")
    for name, spec in shipped_domains(16).items():
        generate_dataset(spec, 6, 0, str(root / name))
    return str(root)


@pytest.fixture
def random_image():
    def factory(seed: int = 0, size: int = 16) -> torch.Tensor:
        generator = torch.Generator().manual_seed(seed)
        return torch.rand(3, size, size, generator=generator) * 2.0 - 1.0
    return factory


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory) -> str:
    """The tiny run configuration as a --config JSON file"""
    path = tmp_path_factory.mktemp("config") / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict()), encoding="utf-8")
    return str(path)
