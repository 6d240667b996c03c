import csv
import json

import pytest
import torch

from app.core.exceptions import ParameterException
from app.repository.datasets import SegmentationDataset
from app.repository.reports import write_benchmark_report, write_loss_log
from app.services.benchmark import run_benchmark, score_dataset
from app.services.seg_losses import total_loss

TARGETS = ("target-noise", "target-restyle")


class BackgroundPredictor:
    """Predicts background everywhere"""

    def predict(self, image: torch.Tensor) -> torch.Tensor:
        return torch.zeros(image.shape[-2:], dtype=torch.long)


class ReferencePredictor(BackgroundPredictor):
    """Copies the reference masks back into a class map"""

    def predict_with_reference(self, image: torch.Tensor, maskset) -> torch.Tensor:
        return maskset.masks.argmax(dim=0)


@pytest.fixture
def datasets(data_root):
    source = SegmentationDataset(f"{data_root}/source-flat")
    return source, [SegmentationDataset(f"{data_root}/{name}") for name in TARGETS]


class TestScoreDataset:
    """Accumulated confusion over one dataset"""

    def test_background_only(self, datasets):
        """A constant prediction scores only the background class"""
        source, _ = datasets
        result, reference, count = score_dataset(BackgroundPredictor(), source)
        assert count == len(source)
        assert reference is None
        assert 0.0 < result.per_class[0] < 1.0
        assert all(value in (0.0, None) for value in result.per_class[1:])

    def test_max_images(self, datasets):
        source, _ = datasets
        assert score_dataset(BackgroundPredictor(), source, max_images=2)[2] == 2

    def test_reference_path(self, datasets):
        """Feeding ground-truth masks back gives a perfect reference score"""
        source, _ = datasets
        _, reference, _ = score_dataset(ReferencePredictor(), source, with_reference=True)
        assert reference.mean == pytest.approx(1.0)

    def test_reference_requires_capable_predictor(self, datasets):
        """A predictor without a reference path cannot be scored with reference"""
        source, _ = datasets
        with pytest.raises(ParameterException):
            score_dataset(BackgroundPredictor(), source, with_reference=True)


class TestRunBenchmark:
    """Source, target and average rows"""

    def test_rows(self, datasets, config_factory):
        """One source row, a row per target and their average"""
        source, targets = datasets
        report = run_benchmark(BackgroundPredictor(), source, targets, config_factory(), "run0")

        assert [row.role for row in report.rows] == ["source", "target", "target", "average"]
        assert [row.dataset for row in report.target_rows] == list(TARGETS)
        assert report.average.miou == pytest.approx(sum(r.miou for r in report.target_rows) / 2)
        assert report.row("source-flat").images == 3
        assert report.config_hash == config_factory().config_hash()

    def test_with_reference_column(self, datasets, config_factory):
        """The reference column is filled on every row, the average included"""
        source, targets = datasets
        config = config_factory({"benchmark.with_reference": True})
        report = run_benchmark(ReferencePredictor(), source, targets, config, "run0")
        assert all(row.reference_miou == pytest.approx(1.0) for row in report.rows)

    def test_no_targets(self, datasets, config_factory):
        """Without targets there is no average row"""
        source, _ = datasets
        report = run_benchmark(BackgroundPredictor(), source, [], config_factory(), "run0")
        assert report.average is None
        assert len(report.rows) == 1

    def test_report_files(self, datasets, config_factory, tmp_path):
        """JSON and CSV carry the run id, config hash and per-class columns"""
        source, targets = datasets
        report = run_benchmark(BackgroundPredictor(), source, targets, config_factory(), "run0")
        paths = write_benchmark_report(report, str(tmp_path))

        with open(paths["csv"], newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["dataset"] for row in rows] == ["source-flat", *TARGETS, "average"]
        assert rows[0]["run_id"] == "run0"
        assert "iou_triangle" in rows[0]
        assert float(rows[-1]["miou"]) == pytest.approx(report.average.miou, abs=1e-6)

        payload = json.loads(paths["json"].read_text())
        assert payload["config_hash"] == report.config_hash


class TestLossLog:
    """losses.csv as written by train"""

    def test_logged_rows_stay_linear(self, tmp_path):
        """Values read back from the log satisfy l_final = lambda1 * l_condit + lambda2 * l_consis within 1e-6"""
        records = [
            total_loss(0.3333334, 0.3333334, lambda1=1.0, lambda2=3.0, step=0),
            total_loss(1.2345678912, 0.0987654321, lambda1=0.7, lambda2=2.5, step=1),
        ]
        path = write_loss_log(records, tmp_path / "losses.csv", "abc")

        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        for row, record in zip(rows, records):
            expected = float(row["lambda1"]) * float(row["l_condit"]) + float(row["lambda2"]) * float(row["l_consis"])
            assert abs(float(row["l_final"]) - expected) <= 1e-6
            assert float(row["l_final"]) == record.l_final
