import numpy as np
import pytest
import torch

from app.core.exceptions import ShapeException, UndefinedMetricException
from app.utils.metrics import confusion_matrix, miou


def brute_force_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = 255) -> float:
    values = []
    valid = gt != ignore_index
    for c in range(num_classes):
        p = (pred == c) & valid
        g = (gt == c) & valid
        union = int((p | g).sum())
        if union:
            values.append(int((p & g).sum()) / union)
    return float(np.mean(values))


class TestConfusionMatrix:
    """Pixel counting"""

    def test_hand_computed(self):
        """Rows are ground truth, columns are predictions"""
        gt = torch.tensor([[0, 0], [1, 255]])
        pred = torch.tensor([[0, 1], [1, 1]])
        assert confusion_matrix(pred, gt, 2).counts == [[1, 1], [0, 1]]

    def test_two_pixel_example(self):
        """gt=[0,1], pred=[1,1] puts one count in (0, 1) and one in (1, 1)"""
        cm = confusion_matrix(torch.tensor([[1], [1]]), torch.tensor([[0], [1]]), 2)
        assert cm.counts == [[0, 1], [0, 1]]

    def test_perfect_prediction_is_diagonal(self):
        gt = torch.tensor([[0, 1], [2, 2]])
        assert confusion_matrix(gt.clone(), gt, 3).counts == [[1, 0, 0], [0, 1, 0], [0, 0, 2]]

    def test_all_ignore_gives_zero_matrix(self):
        """Nothing is counted when every pixel is ignore"""
        cm = confusion_matrix(torch.zeros(3, 3), torch.full((3, 3), 255), 4)
        assert cm.total == 0

    def test_shape_mismatch(self):
        """Prediction and ground truth must have equal shape"""
        with pytest.raises(ShapeException):
            confusion_matrix(torch.zeros(2, 2), torch.zeros(2, 3), 2)

    def test_matrices_add(self):
        """Accumulating per-image matrices equals counting the concatenation"""
        gt = torch.tensor([[0, 1, 2, 1]])
        pred = torch.tensor([[0, 2, 2, 1]])
        split = confusion_matrix(pred[:, :2], gt[:, :2], 3) + confusion_matrix(pred[:, 2:], gt[:, 2:], 3)
        assert split.counts == confusion_matrix(pred, gt, 3).counts


class TestMeanIoU:
    """Per-class IoU and its mean over defined classes"""

    def test_hand_computed(self):
        """Two classes with known overlaps"""
        gt = torch.tensor([[0, 0, 1, 1]])
        pred = torch.tensor([[0, 1, 1, 1]])
        result = miou(confusion_matrix(pred, gt, 2))
        assert result.per_class == pytest.approx([0.5, 2 / 3])
        assert result.mean == pytest.approx((0.5 + 2 / 3) / 2)
        assert result.pixel_accuracy == pytest.approx(0.75)

    def test_constant_prediction(self):
        """Predicting class 0 on a half 0 / half 1 map gives IoU [0.5, 0.0]"""
        gt = torch.tensor([[0, 0, 1, 1]])
        result = miou(confusion_matrix(torch.zeros_like(gt), gt, 2))
        assert result.per_class == [0.5, 0.0]
        assert result.mean == pytest.approx(0.25)

    def test_perfect_prediction(self):
        gt = torch.tensor([[0, 1, 3, 3]])
        result = miou(confusion_matrix(gt.clone(), gt, 4))
        assert result.mean == 1.0
        assert result.per_class == [1.0, 1.0, None, 1.0]

    def test_absent_class_is_excluded(self):
        """A class in neither map has no IoU and does not lower the mean"""
        gt = torch.tensor([[0, 1]])
        result = miou(confusion_matrix(gt.clone(), gt, 3))
        assert result.per_class[2] is None
        assert result.mean == pytest.approx(1.0)

    def test_matches_brute_force(self):
        """Twenty random 8x8 maps agree with a direct set computation"""
        rng = np.random.default_rng(0)
        for _ in range(20):
            gt = rng.integers(0, 4, (8, 8))
            gt[rng.random((8, 8)) < 0.1] = 255
            pred = rng.integers(0, 4, (8, 8))
            result = miou(confusion_matrix(torch.from_numpy(pred), torch.from_numpy(gt), 4))
            assert result.mean == pytest.approx(brute_force_miou(pred, gt, 4), abs=1e-12)

    def test_class_permutation_equivariance(self):
        """Relabeling classes permutes per-class IoU and keeps the mean"""
        rng = np.random.default_rng(1)
        gt = torch.from_numpy(rng.integers(0, 4, (8, 8)))
        pred = torch.from_numpy(rng.integers(0, 4, (8, 8)))
        perm = torch.tensor([2, 0, 3, 1])

        base = miou(confusion_matrix(pred, gt, 4))
        permuted = miou(confusion_matrix(perm[pred], perm[gt], 4))

        assert permuted.mean == pytest.approx(base.mean)
        for c in range(4):
            assert permuted.per_class[int(perm[c])] == pytest.approx(base.per_class[c])

    def test_undefined_when_no_class_present(self):
        """An empty matrix has no mIoU"""
        with pytest.raises(UndefinedMetricException):
            miou(confusion_matrix(torch.zeros(2, 2), torch.full((2, 2), 255), 3))
