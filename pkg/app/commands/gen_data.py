import click

from app.commands.options import dataset_path, resolve_config, run_options
from app.core.exceptions import ParameterException
from app.services.dataset import generate_dataset, shipped_domains


@click.command("gen-data")
@run_options
@click.option("--n-images", type=int, default=None, help="Image/label pairs per domain")
@click.option("--resolution", type=int, default=None, help="Image side length")
def gen_data(n_images, resolution, **common):
    """Write the source and target domains with shared geometry from one seed"""
    # the dataset root is the output of this command
    if common.get("out_dir") and not common.get("data_root"):
        common["data_root"] = common.pop("out_dir")
    config = resolve_config(common, {"data.n_images": n_images, "data.resolution": resolution})

    domains = shipped_domains(config.data.resolution)
    names = [config.data.source, *config.data.targets]
    unknown = [name for name in names if name not in domains]
    if unknown:
        raise ParameterException(f"No generator for domains {unknown}; available: {sorted(domains)}")

    for name in names:
        path = generate_dataset(
            domains[name],
            config.data.n_images,
            config.seed,
            str(dataset_path(config, name)),
            class_names=config.data.class_names,
            ignore_index=config.data.ignore_index,
        )
        click.echo(f"{name}: {config.data.n_images} images in {path}")
