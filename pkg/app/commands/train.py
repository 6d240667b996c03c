from pathlib import Path
from typing import List

import click

from app.commands.options import align_with_checkpoint, load_dataset, open_cache, resolve_config, run_options
from app.core.exceptions import StateException
from app.core.logger import get_logger
from app.repository.checkpoints import load_diffusion_checkpoint, save_trainer_checkpoint
from app.repository.reports import write_eval_snapshots, write_loss_log
from app.schemas.training import EvalSnapshot
from app.services.benchmark import score_dataset
from app.services.training import build_trainer, run_training

logger = get_logger(__name__)


@click.command("train")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Pretrained diffusion checkpoint (default: <out>/diffusion.pt)")
@click.option("--mode", type=click.Choice(["ipkl", "diff_only", "baseline"]), default=None)
@click.option("--no-consis", is_flag=True, default=False, help="Drop the consistency term (lambda2 = 0)")
@click.option("--iters", type=int, default=None, help="Training steps")
def train(checkpoint, mode, no_consis, iters, **common):
    """Train the segmentation head with implicit posterior knowledge learning"""
    config = resolve_config(common, {
        "training.mode": mode,
        "training.steps": iters,
        "training.lambda2": 0.0 if no_consis else None,
    })
    checkpoint = checkpoint or str(Path(config.output_dir) / "diffusion.pt")
    model, pretrain_hash = load_diffusion_checkpoint(checkpoint)
    config = align_with_checkpoint(config, model)
    logger.info(f"Training config {config.config_hash()} on backbone from config {pretrain_hash}")

    source = load_dataset(config, config.data.source, max_images=config.data.n_images)
    trainer = build_trainer(config, model, open_cache())

    snapshots: List[EvalSnapshot] = []

    def snapshot(current) -> None:
        result, _, images = score_dataset(current, source, max_images=config.training.eval_images)
        snapshots.append(EvalSnapshot(
            step=current.step, dataset=source.name, miou=result.mean, pixel_accuracy=result.pixel_accuracy,
            images=images,
        ))
        logger.info(f"eval at step {current.step}: {source.name} mIoU {result.mean:.4f}")

    records = run_training(trainer, source, config, on_eval=snapshot)

    report = trainer.freeze_check()
    if not report.passed:
        raise StateException("Frozen weights changed during training", errors=report.failed_groups)

    out = Path(config.output_dir)
    path = save_trainer_checkpoint(trainer, model, config, str(out / "trainer.pt"))
    write_loss_log(records, out / "losses.csv", config.config_hash())
    write_eval_snapshots(snapshots, out / "eval_snapshots.csv")

    last = records[-1].l_final if records else float("nan")
    click.echo(f"config {config.config_hash()}: {len(records)} steps, final loss {last:.6f}, checkpoint {path}")
