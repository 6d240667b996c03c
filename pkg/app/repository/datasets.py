import json
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError
from torch.utils.data import Dataset

from app.core.exceptions import DataException, NotFoundException, StorageException
from app.core.logger import get_logger
from app.schemas.data import DatasetManifest

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"


def prepare_dataset_dir(root: Path) -> None:
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageException(f"Cannot create dataset directory {root}", errors=str(e))


def write_sample(root: Path, name: str, image: np.ndarray, label: np.ndarray) -> None:
    """Write an 8-bit RGB image and an 8-bit single-channel label map"""
    try:
        Image.fromarray(image.astype(np.uint8)).save(root / "images" / f"{name}.png")
        Image.fromarray(label.astype(np.uint8)).save(root / "labels" / f"{name}.png")
    except OSError as e:
        raise StorageException(f"Cannot write sample {name} under {root}", errors=str(e))


def write_manifest(root: Path, manifest: DatasetManifest) -> None:
    try:
        (root / MANIFEST_FILE).write_text(
            json.dumps(manifest.model_dump(mode="json"), indent=1, sort_keys=True), encoding="utf-8"
        )
    except OSError as e:
        raise StorageException(f"Cannot write manifest under {root}", errors=str(e))


def read_manifest(root: Path) -> DatasetManifest:
    path = Path(root) / MANIFEST_FILE
    if not path.is_file():
        raise NotFoundException(f"Dataset not found: {root} has no {MANIFEST_FILE}")
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DataException(f"Malformed dataset manifest in {root}", errors=str(e))


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) to float (3, H, W) in [-1, 1]"""
    return torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


class SegmentationDataset(Dataset):
    """Image/label pairs of one generated domain, held in memory"""

    def __init__(self, root: str, max_images: Optional[int] = None):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.names: List[str] = self.manifest.files[:max_images] if max_images else list(self.manifest.files)
        images, labels = [], []
        for name in self.names:
            image_path = self.root / "images" / f"{name}.png"
            label_path = self.root / "labels" / f"{name}.png"
            if not image_path.is_file() or not label_path.is_file():
                raise NotFoundException(f"Sample {name} is missing from {self.root}")
            images.append(image_to_tensor(np.asarray(Image.open(image_path).convert("RGB"))))
            labels.append(torch.from_numpy(np.asarray(Image.open(label_path), dtype=np.int64).copy()))
        self.images = torch.stack(images)
        self.labels = torch.stack(labels)
        logger.debug(f"Loaded {len(self.names)} samples from {self.root}")

    @property
    def name(self) -> str:
        return self.manifest.domain

    @property
    def class_names(self) -> List[str]:
        return self.manifest.class_names

    @property
    def ignore_index(self) -> int:
        return self.manifest.ignore_index

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.images[index], self.labels[index]


def captions_from_labels(labels: torch.Tensor, class_names: List[str], ignore_index: int = 255) -> List[List[str]]:
    """Names of the classes present in each label map, in class order"""
    captions = []
    for label in labels:
        values = torch.unique(label)
        present = [int(v) for v in values if int(v) != ignore_index and 0 <= int(v) < len(class_names)]
        captions.append([class_names[v] for v in sorted(present)])
    return captions
