import zlib
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, ImageFilter
from tqdm import tqdm

from app.core.exceptions import ParameterException
from app.core.logger import get_logger
from app.repository.datasets import prepare_dataset_dir, write_manifest, write_sample
from app.schemas.config import DEFAULT_CLASS_NAMES
from app.schemas.data import ClassAppearance, DatasetManifest, DomainSpec, ShapeRecord, Texture

logger = get_logger(__name__)

SHAPE_CLASSES = {1: "circle", 2: "square", 3: "triangle"}

BASE_COLORS = [
    (0.15, 0.15, 0.20),  # background
    (0.85, 0.25, 0.20),  # circle
    (0.25, 0.75, 0.30),  # square
    (0.25, 0.35, 0.85),  # triangle
]


def shipped_domains(resolution: int = 32) -> Dict[str, DomainSpec]:
    """source-flat, target-noise (additive noise) and target-restyle (permuted palette + blur)"""
    base = [ClassAppearance(mean=color) for color in BASE_COLORS]
    restyled = [base[0], base[3], base[1], base[2]]
    return {
        "source-flat": DomainSpec(name="source-flat", palette=base, resolution=resolution),
        "target-noise": DomainSpec(
            name="target-noise", palette=base, texture=Texture.NOISE, noise_sigma=0.15, resolution=resolution
        ),
        "target-restyle": DomainSpec(name="target-restyle", palette=restyled, blur_radius=1, resolution=resolution),
    }


def rasterize(kind: str, cx: int, cy: int, radius: int, resolution: int) -> np.ndarray:
    """Boolean (H, W) mask of a shape, sampled at integer pixel coordinates"""
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    if kind == "square":
        return (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    if kind == "triangle":
        # upward isosceles triangle inscribed in the square of half-side radius
        top = (cx, cy - radius)
        left = (cx - radius, cy + radius)
        right = (cx + radius, cy + radius)

        def edge(a, b):
            return (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])

        e1, e2, e3 = edge(top, left), edge(left, right), edge(right, top)
        return ((e1 <= 0) & (e2 <= 0) & (e3 <= 0)) | ((e1 >= 0) & (e2 >= 0) & (e3 >= 0))
    raise ParameterException(f"Unknown shape kind: {kind}")


def sample_geometry(rng: np.random.Generator, resolution: int, max_attempts: int = 50) -> Tuple[np.ndarray, List[ShapeRecord]]:
    """Label map with 1-3 non-overlapping shapes kept one pixel away from each other and the border"""
    label = np.zeros((resolution, resolution), dtype=np.uint8)
    shapes: List[ShapeRecord] = []
    min_r = max(2, resolution // 10)
    max_r = max(min_r, resolution // 5)

    for _ in range(int(rng.integers(1, 4))):
        for _ in range(max_attempts):
            class_index = int(rng.integers(1, 4))
            radius = int(rng.integers(min_r, max_r + 1))
            cx = int(rng.integers(radius + 1, resolution - radius - 1))
            cy = int(rng.integers(radius + 1, resolution - radius - 1))
            kind = SHAPE_CLASSES[class_index]
            if (rasterize(kind, cx, cy, radius + 1, resolution) & (label > 0)).any():
                continue
            label[rasterize(kind, cx, cy, radius, resolution)] = class_index
            shapes.append(ShapeRecord(kind=kind, class_index=class_index, cx=cx, cy=cy, radius=radius))
            break
    return label, shapes


def render(label: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Paint a label map in a domain's appearance; returns uint8 (H, W, 3)"""
    image = np.zeros(label.shape + (3,), dtype=np.float64)
    # every class draws its color so the appearance stream advances identically per image
    for class_index, appearance in enumerate(spec.palette):
        color = np.clip(np.asarray(appearance.mean) + rng.normal(0.0, appearance.jitter, 3), 0.0, 1.0)
        image[label == class_index] = color

    if spec.texture == Texture.STRIPES:
        half = max(1, spec.stripe_period // 2)
        ys = np.arange(label.shape[0])[:, None]
        stripes = ((ys // half) % 2).astype(np.float64)
        image *= (1.0 - spec.stripe_contrast * stripes)[..., None]
    elif spec.texture == Texture.NOISE:
        image += rng.normal(0.0, spec.noise_sigma, image.shape)

    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if spec.blur_radius > 0:
        pixels = np.asarray(Image.fromarray(pixels).filter(ImageFilter.BoxBlur(spec.blur_radius)))
    return pixels


def _domain_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def generate_dataset(
    spec: DomainSpec,
    n_images: int,
    seed: int,
    out_dir: str,
    class_names: List[str] = DEFAULT_CLASS_NAMES,
    ignore_index: int = 255
) -> Path:
    """
    Write n_images image/label pairs of one synthetic domain

    Geometry comes from a stream seeded by `seed` alone, so domains generated
    with the same seed share label maps; appearance comes from a stream seeded
    by (seed, domain name).

    Args:
        spec: Domain appearance
        n_images: Number of pairs, at least 1
        seed: Random seed
        out_dir: Dataset directory to create
        class_names: Class names in channel order
        ignore_index: Ignore label recorded in the manifest

    Returns:
        Path of the dataset directory

    Raises:
        ParameterException: If n_images < 1 or the palette does not cover the classes
        StorageException: If the directory cannot be written
    """
    if n_images < 1:
        raise ParameterException(f"n_images must be at least 1, got {n_images}")
    if len(spec.palette) != len(class_names):
        raise ParameterException(f"Palette has {len(spec.palette)} entries for {len(class_names)} classes")

    root = Path(out_dir)
    prepare_dataset_dir(root)
    geometry_rng = np.random.default_rng(seed)
    appearance_rng = _domain_stream(seed, spec.name)

    files, shapes = [], {}
    for index in tqdm(range(n_images), desc=f"gen {spec.name}", leave=False):
        name = f"{index:04d}"
        label, records = sample_geometry(geometry_rng, spec.resolution)
        write_sample(root, name, render(label, spec, appearance_rng), label)
        files.append(name)
        shapes[name] = records

    write_manifest(root, DatasetManifest(
        domain=spec.name,
        seed=seed,
        resolution=spec.resolution,
        ignore_index=ignore_index,
        class_names=list(class_names),
        files=files,
        shapes=shapes,
    ))
    logger.info(f"Generated {n_images} samples for domain {spec.name} in {root}")
    return root
