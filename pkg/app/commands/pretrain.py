from pathlib import Path

import click

from app.commands.options import load_dataset, resolve_config, run_options
from app.core.logger import get_logger
from app.repository.checkpoints import save_diffusion_checkpoint
from app.repository.reports import write_loss_curve
from app.services.diffusion import DiffusionModel
from app.services.pretraining import pretrain as run_pretraining

logger = get_logger(__name__)


@click.command("pretrain")
@run_options
@click.option("--iters", type=int, default=None, help="Pretraining steps")
def pretrain(iters, **common):
    """Pretrain the toy diffusion model on captioned source images"""
    config = resolve_config(common, {"pretrain.steps": iters})
    dataset = load_dataset(config, config.data.source, max_images=config.data.n_images)

    model = DiffusionModel.create(config.unet, config.condition, config.schedule, config.data.class_names, config.seed)
    result = run_pretraining(model, dataset, config.pretrain, config.seed)

    out = Path(config.output_dir)
    checkpoint = save_diffusion_checkpoint(model, str(out / "diffusion.pt"), config.config_hash())
    write_loss_curve(result, out / "pretrain_loss.csv", config.config_hash())

    final = f"{result.final_loss:.6f}" if result.final_loss is not None else "n/a"
    click.echo(f"config {config.config_hash()}: final loss {final}, checkpoint {checkpoint}")
