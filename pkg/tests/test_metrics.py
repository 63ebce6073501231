"""Tests for task metrics and fold aggregation."""

import numpy as np
import pytest
from sklearn.metrics import f1_score

from cmkd.exceptions import NumericalError, ShapeError
from cmkd.metrics import (
    accuracy,
    aggregate,
    ccc,
    confusion_matrix,
    macro_f1,
    pcc,
    primary_metric,
    rmse,
    summarize,
    task_metrics,
)
from cmkd.schemas import Task


class TestClassification:
    """Tests for accuracy and macro-F1"""

    def test_perfect(self):
        """Test that perfect predictions score 1.0 on both."""
        y = [0, 1, 2, 1]
        assert accuracy(y, y) == 1.0
        assert macro_f1(y, y, 3) == 1.0

    def test_binary_all_zero(self):
        """Test predictions all 0 on balanced binary labels."""
        pred, y = [0, 0, 0, 0], [0, 0, 1, 1]
        assert accuracy(pred, y) == 0.5
        assert macro_f1(pred, y, 2) == pytest.approx(1 / 3, abs=1e-12)

    def test_confusion_matrix_orientation(self):
        """Test cm[true, predicted]."""
        cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
        assert cm.tolist() == [[1, 1], [0, 1]]

    def test_macro_f1_oracle(self, rng):
        """Test against scikit-learn on random labels."""
        y = rng.integers(0, 4, size=200)
        pred = rng.integers(0, 4, size=200)
        expected = f1_score(y, pred, average="macro")
        assert macro_f1(pred, y, 4) == pytest.approx(expected, abs=1e-12)

    def test_absent_class_excluded(self):
        """Test that a class never predicted nor present is left out."""
        assert macro_f1([0, 1], [0, 1], 5) == 1.0

    def test_relabeling_invariance(self, rng):
        """Test that permuting class ids in both series changes nothing."""
        y = rng.integers(0, 4, size=120)
        pred = np.where(rng.random(120) < 0.6, y, rng.integers(0, 4, size=120))
        perm = rng.permutation(4)
        assert accuracy(perm[pred], perm[y]) == accuracy(pred, y)
        assert macro_f1(perm[pred], perm[y], 4) == pytest.approx(
            macro_f1(pred, y, 4), abs=1e-12
        )

    def test_confusion_matrix_oracle(self, rng):
        """Test counts against a double loop."""
        y, pred = rng.integers(0, 3, size=50), rng.integers(0, 3, size=50)
        cm = confusion_matrix(pred, y, 3)
        for t in range(3):
            for p in range(3):
                assert cm[t, p] == np.sum((y == t) & (pred == p))

    def test_length_mismatch(self):
        """Test that lengths must agree."""
        with pytest.raises(ShapeError):
            accuracy([0, 1], [0])

    def test_label_range(self):
        """Test that class indices must lie below C."""
        with pytest.raises(ShapeError):
            macro_f1([0, 3], [0, 1], 2)


class TestRegression:
    """Tests for rmse, pcc and ccc"""

    def test_identity(self, rng):
        """Test that ŷ == y gives rmse 0, pcc 1 and ccc 1."""
        y = rng.normal(size=20)
        assert rmse(y, y) == 0.0
        assert pcc(y, y) == pytest.approx(1.0)
        assert ccc(y, y) == pytest.approx(1.0)

    def test_doubled_series(self, rng):
        """Test ŷ = 2y for zero-mean y: pcc 1, ccc 4/5."""
        y = rng.normal(size=30)
        y -= y.mean()
        assert pcc(2 * y, y) == pytest.approx(1.0)
        assert ccc(2 * y, y) == pytest.approx(0.8, abs=1e-12)

    def test_shifted_scaled_series(self, rng):
        """Test that ŷ = 2y + 1 is perfectly correlated but not concordant."""
        y = rng.normal(size=40)
        assert pcc(2 * y + 1, y) == pytest.approx(1.0)
        assert ccc(2 * y + 1, y) < 1.0

    def test_two_pass_oracles(self, rng):
        """Test rmse and pcc against direct statistics."""
        p, y = rng.normal(size=25), rng.normal(size=25)
        assert rmse(p, y) == pytest.approx(np.sqrt(np.mean((p - y) ** 2)), abs=1e-12)
        dp, dy = p - p.mean(), y - y.mean()
        expected = np.sum(dp * dy) / np.sqrt(np.sum(dp**2) * np.sum(dy**2))
        assert pcc(p, y) == pytest.approx(expected, abs=1e-12)

    def test_pcc_affine_invariance(self, rng):
        """Test that pcc ignores positive affine maps of the predictions."""
        p, y = rng.normal(size=15), rng.normal(size=15)
        assert pcc(3 * p + 7, y) == pytest.approx(pcc(p, y), abs=1e-12)

    def test_rmse_symmetric(self, rng):
        """Test rmse(a, b) == rmse(b, a)."""
        a, b = rng.normal(size=10), rng.normal(size=10)
        assert rmse(a, b) == rmse(b, a)

    def test_constant_series(self):
        """Test that correlations of a constant series are undefined."""
        with pytest.raises(NumericalError):
            pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        with pytest.raises(NumericalError):
            ccc([2.0, 2.0], [2.0, 2.0])

    def test_task_metrics_constant_predictions(self):
        """Test that constant CER outputs report 0 for the correlations."""
        out = task_metrics(Task.CER, np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]))
        assert out["pcc"] == 0.0
        assert out["rmse"] == pytest.approx(np.sqrt(14 / 3))

    def test_task_metrics_dec_uses_argmax(self):
        """Test that DEC metrics read classes from the logits."""
        logits = np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]])
        out = task_metrics(Task.DEC, logits, np.array([0, 1, 1]), num_classes=2)
        assert out["accuracy"] == pytest.approx(2 / 3)
        assert set(out) == {"accuracy", "macro_f1"}

    def test_primary_metric(self):
        """Test the ranking metric per task."""
        assert primary_metric(Task.DEC) == ("accuracy", "max")
        assert primary_metric(Task.CER) == ("rmse", "min")


class TestAggregation:
    """Tests for summarize and aggregate"""

    def test_identical_scores(self):
        """Test that identical fold scores have std 0."""
        summary = summarize([0.7] * 5)
        assert summary.mean == pytest.approx(0.7)
        assert summary.std == 0.0

    def test_two_pass_oracle(self, rng):
        """Test mean and sample std against a direct two-pass computation."""
        values = rng.normal(size=5)
        mean = np.sum(values) / 5
        std = np.sqrt(np.sum((values - mean) ** 2) / 4)
        summary = summarize(values)
        assert summary.mean == pytest.approx(mean, abs=1e-12)
        assert summary.std == pytest.approx(std, abs=1e-12)
        assert summary.values == values.tolist()

    def test_aggregate_per_metric(self):
        """Test that each metric is summarized over folds."""
        result = aggregate([{"acc": 0.5, "f1": 0.4}, {"acc": 0.7, "f1": 0.6}])
        assert result["acc"].mean == pytest.approx(0.6)
        assert result["f1"].values == [0.4, 0.6]
        assert aggregate([]) == {}

    def test_empty(self):
        """Test that nothing cannot be summarized."""
        with pytest.raises(ShapeError):
            summarize([])
