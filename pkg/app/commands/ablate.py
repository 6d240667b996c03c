from pathlib import Path

import click

from app.commands.options import align_with_checkpoint, load_dataset, open_cache, resolve_config, run_options
from app.repository.checkpoints import load_diffusion_checkpoint
from app.repository.reports import write_ablation_report
from app.services.ablation import run_ablation
from app.utils.hashing import file_digest, make_run_id


@click.command("ablate")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Pretrained diffusion checkpoint (default: <out>/diffusion.pt)")
@click.option("--iters", type=int, default=None, help="Training steps per arm")
def ablate(checkpoint, iters, **common):
    """Train and score the five component arms from one backbone"""
    config = resolve_config(common, {"training.steps": iters})
    checkpoint = checkpoint or str(Path(config.output_dir) / "diffusion.pt")
    model, _ = load_diffusion_checkpoint(checkpoint)
    config = align_with_checkpoint(config, model)

    source = load_dataset(config, config.data.source, max_images=config.data.n_images)
    targets = [load_dataset(config, name, max_images=config.benchmark.max_images) for name in config.data.targets]
    run_id = make_run_id(config.config_hash(), file_digest(checkpoint), config.data.targets)

    report = run_ablation(config, model, source, targets, run_id, open_cache())
    paths = write_ablation_report(report, config.output_dir)

    for row in report.rows:
        click.echo(f"{row.arm.name:<16} source {row.source_miou:.4f}  target avg {row.average_miou:.4f}")
    observed = "holds" if report.ordering_holds else "does not hold"
    click.echo(f"ordering {' >= '.join(report.ordering)} {observed}; report {paths['json']}")
