import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

from pydantic import BaseModel

from app.core.exceptions import StorageException
from app.core.logger import get_logger
from app.schemas.data import AblationReport, BenchmarkReport
from app.schemas.segmentation import LossRecord
from app.schemas.training import EvalSnapshot, PretrainResult

logger = get_logger(__name__)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        # shortest text that reads back to the same double
        return repr(float(value))
    return str(value)


def write_json(model: BaseModel, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise StorageException(f"Cannot write {path}", errors=str(e))
    return path


def write_csv(header: Sequence[str], rows: Iterable[Sequence], path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(value) for value in row])
    except OSError as e:
        raise StorageException(f"Cannot write {path}", errors=str(e))
    return path


def write_benchmark_report(report: BenchmarkReport, out_dir: str) -> Dict[str, Path]:
    """benchmark.json with every field and benchmark.csv with one row per dataset"""
    root = Path(out_dir)
    header = ["run_id", "config_hash", "dataset", "role", "images", "miou", "pixel_accuracy", "reference_miou"]
    header += [f"iou_{name}" for name in report.class_names]

    rows: List[List] = []
    for row in report.rows:
        per_class = row.per_class_iou or [None] * len(report.class_names)
        rows.append([
            report.run_id, report.config_hash, row.dataset, row.role, row.images,
            row.miou, row.pixel_accuracy, row.reference_miou, *per_class,
        ])
    paths = {"json": write_json(report, root / "benchmark.json"), "csv": write_csv(header, rows, root / "benchmark.csv")}
    logger.info(f"Benchmark report {report.run_id} written to {root}")
    return paths


def write_ablation_report(report: AblationReport, out_dir: str) -> Dict[str, Path]:
    root = Path(out_dir)
    targets = sorted({name for row in report.rows for name in row.target_miou})
    header = ["run_id", "arm", "diff", "ipkl", "consistency", "config_hash", "source_miou"]
    header += [f"miou_{name}" for name in targets] + ["average_miou"]
    rows = [
        [report.run_id, row.arm.name, row.arm.diff, row.arm.ipkl, row.arm.consistency, row.config_hash,
         row.source_miou, *[row.target_miou.get(name) for name in targets], row.average_miou]
        for row in report.rows
    ]
    return {"json": write_json(report, root / "ablation.json"), "csv": write_csv(header, rows, root / "ablation.csv")}


def write_loss_log(records: Sequence[LossRecord], path: Path, config_hash: str) -> Path:
    header = ["config_hash", "step", "l_condit", "l_consis", "l_final", "lambda1", "lambda2", "degenerate"]
    rows = [
        [config_hash, r.step, r.l_condit, r.l_consis, r.l_final, r.lambda1, r.lambda2, r.degenerate]
        for r in records
    ]
    return write_csv(header, rows, path)


def write_loss_curve(result: PretrainResult, path: Path, config_hash: str) -> Path:
    """One row per step; the running average is blank until a full window has been seen"""
    offset = result.window - 1
    rows = (
        [config_hash, i, loss, result.moving_average[i - offset] if i >= offset and result.moving_average else None]
        for i, loss in enumerate(result.losses)
    )
    return write_csv(["config_hash", "step", "loss", "moving_average"], rows, path)


def write_eval_snapshots(snapshots: Sequence[EvalSnapshot], path: Path) -> Path:
    header = ["step", "dataset", "images", "miou", "pixel_accuracy"]
    rows = [[s.step, s.dataset, s.images, s.miou, s.pixel_accuracy] for s in snapshots]
    return write_csv(header, rows, path)
