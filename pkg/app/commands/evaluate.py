from pathlib import Path

import click

from app.commands.options import load_dataset, name_list, open_cache
from app.core.logger import get_logger
from app.core.run_config import apply_overrides
from app.repository.checkpoints import load_trainer_checkpoint
from app.repository.reports import write_benchmark_report
from app.services.benchmark import run_benchmark
from app.services.training import restore_trainer
from app.utils.hashing import file_digest, make_run_id

logger = get_logger(__name__)


@click.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="Trainer checkpoint")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Report directory (default: next to the checkpoint)")
@click.option("--data", "data_root", type=click.Path(file_okay=False), default=None, help="Dataset root")
@click.option("--targets", type=str, default=None, callback=name_list, help="Target domains, comma-separated")
@click.option("--with-reference", is_flag=True, default=False, help="Add the reference-input diagnostic column")
@click.option("--max-images", type=int, default=None, help="Cap on images scored per dataset")
def evaluate(checkpoint, out_dir, data_root, targets, with_reference, max_images):
    """Benchmark a trained model on the source and target domains"""
    saved_config, model, state = load_trainer_checkpoint(checkpoint)
    # only data and benchmark settings may differ from the trained run
    overrides = {
        "data.root": data_root,
        "data.targets": targets,
        "benchmark.max_images": max_images,
        "benchmark.with_reference": True if with_reference else None,
    }
    config = apply_overrides(saved_config, {key: value for key, value in overrides.items() if value is not None})
    trainer = restore_trainer(saved_config, model, state, open_cache())

    source = load_dataset(config, config.data.source)
    target_sets = [load_dataset(config, name) for name in config.data.targets]
    run_id = make_run_id(saved_config.config_hash(), file_digest(checkpoint), config.data.targets)

    report = run_benchmark(trainer, source, target_sets, config, run_id)
    paths = write_benchmark_report(report, out_dir or str(Path(checkpoint).parent))

    for row in report.rows:
        reference = f" (reference {row.reference_miou:.4f})" if row.reference_miou is not None else ""
        click.echo(f"{row.dataset:<16} {row.role:<8} mIoU {row.miou:.4f}{reference}")
    click.echo(f"run {run_id}, config {report.config_hash}: {paths['json']}")
