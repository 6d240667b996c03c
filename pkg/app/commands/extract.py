from pathlib import Path

import click
from tqdm import tqdm

from app.commands.options import align_with_checkpoint, load_dataset, open_cache, resolve_config, run_options
from app.repository.checkpoints import load_diffusion_checkpoint
from app.services.diff_fusion import DiffusionFeatureExtractor
from app.services.path_control import decompose_annotation


@click.command("extract")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Pretrained diffusion checkpoint (default: <out>/diffusion.pt)")
@click.option("--dataset", "dataset_name", type=str, default=None, help="Domain to extract (default: source)")
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None,
              help="Feature cache directory (default: DIFFSEG_CACHE)")
@click.option("--conditional", is_flag=True, default=False, help="Also cache the mask-conditioned features")
@click.option("--max-images", type=int, default=None)
def extract(checkpoint, dataset_name, cache_dir, conditional, max_images, **common):
    """Warm the feature cache with stacked diffusion features of a dataset"""
    config = resolve_config(common)
    checkpoint = checkpoint or str(Path(config.output_dir) / "diffusion.pt")
    model, _ = load_diffusion_checkpoint(checkpoint)
    config = align_with_checkpoint(config, model)

    cache = open_cache(cache_dir, required=True)
    extractor = DiffusionFeatureExtractor(model, config.trajectory, cache)
    dataset = load_dataset(config, dataset_name or config.data.source, max_images=max_images)

    before = len(cache)
    for index in tqdm(range(len(dataset)), desc=f"extract {dataset.name}", leave=False):
        image, label = dataset[index]
        extractor.stacked(image)
        if conditional:
            extractor.stacked(image, decompose_annotation(label, dataset.class_names, dataset.ignore_index))

    click.echo(
        f"{dataset.name}: {len(dataset)} images, {extractor.stacked_channels} stacked channels at 1/"
        f"{extractor.output_scale} resolution, {len(cache) - before} new cache entries in {cache.directory}"
    )
