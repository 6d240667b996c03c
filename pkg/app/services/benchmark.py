from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.core.exceptions import ParameterException
from app.core.logger import get_logger
from app.repository.datasets import SegmentationDataset
from app.schemas.config import RunConfig
from app.schemas.data import BenchmarkReport, BenchmarkRow, ConfusionMatrix, IoUResult
from app.services.path_control import decompose_annotation
from app.services.training import Predictor
from app.utils.metrics import confusion_matrix, miou

logger = get_logger(__name__)


def score_dataset(
    predictor: Predictor,
    dataset: SegmentationDataset,
    max_images: Optional[int] = None,
    with_reference: bool = False
) -> Tuple[IoUResult, Optional[IoUResult], int]:
    """
    Accumulate one confusion matrix per path over a dataset and reduce it to mIoU

    Labels are read only for scoring, except on the reference path, which
    feeds the ground-truth masks to predict_with_reference.

    Returns:
        (unconditional result, reference result or None, images scored)
    """
    if with_reference and not hasattr(predictor, "predict_with_reference"):
        raise ParameterException("This predictor has no reference-input path")

    num_classes = len(dataset.class_names)
    count = len(dataset) if max_images is None else min(max_images, len(dataset))
    zero = ConfusionMatrix(counts=[[0] * num_classes for _ in range(num_classes)])
    total, reference_total = zero, zero

    for index in tqdm(range(count), desc=f"eval {dataset.name}", leave=False):
        image, label = dataset[index]
        pred = predictor.predict(image)
        total = total + confusion_matrix(pred, label, num_classes, dataset.ignore_index)
        if with_reference:
            maskset = decompose_annotation(label, dataset.class_names, dataset.ignore_index)
            reference = predictor.predict_with_reference(image, maskset)
            reference_total = reference_total + confusion_matrix(reference, label, num_classes, dataset.ignore_index)

    return miou(total), miou(reference_total) if with_reference else None, count


def _row(dataset: SegmentationDataset, role: str, result: IoUResult, reference: Optional[IoUResult],
         images: int) -> BenchmarkRow:
    return BenchmarkRow(
        dataset=dataset.name,
        role=role,
        miou=result.mean,
        per_class_iou=result.per_class,
        pixel_accuracy=result.pixel_accuracy,
        reference_miou=reference.mean if reference is not None else None,
        images=images,
    )


def run_benchmark(
    predictor: Predictor,
    source_dataset: Optional[SegmentationDataset],
    target_datasets: Sequence[SegmentationDataset],
    config: RunConfig,
    run_id: str
) -> BenchmarkReport:
    """
    Score a predictor on the source domain and every target domain

    Args:
        predictor: Trained model exposing predict(image)
        source_dataset: Source-domain dataset, or None to skip the source row
        target_datasets: Unseen target-domain datasets
        config: Run configuration (benchmark section and class names)
        run_id: Identifier stamped on the report

    Returns:
        BenchmarkReport with a source row, one row per target and, when there
        are targets, an average row whose mIoU is the mean of the target rows
    """
    bench = config.benchmark
    rows: List[BenchmarkRow] = []

    if source_dataset is not None:
        result, reference, images = score_dataset(predictor, source_dataset, bench.max_images, bench.with_reference)
        rows.append(_row(source_dataset, "source", result, reference, images))

    for dataset in target_datasets:
        result, reference, images = score_dataset(predictor, dataset, bench.max_images, bench.with_reference)
        rows.append(_row(dataset, "target", result, reference, images))
        logger.info(f"{dataset.name}: mIoU {result.mean:.4f}")

    targets = [row for row in rows if row.role == "target"]
    if targets:
        rows.append(BenchmarkRow(
            dataset="average",
            role="average",
            miou=float(np.mean([row.miou for row in targets])),
            reference_miou=float(np.mean([row.reference_miou for row in targets])) if bench.with_reference else None,
            images=sum(row.images for row in targets),
        ))
    else:
        logger.warning("Benchmark has no target datasets; no average row")

    return BenchmarkReport(
        run_id=run_id,
        config_hash=config.config_hash(),
        class_names=list(config.data.class_names),
        rows=rows,
    )
