"""Evaluation metrics for both tasks plus fold aggregation."""

from typing import Sequence

import numpy as np
from scipy.stats import pearsonr
from sklearn.metrics import accuracy_score
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import f1_score

from cmkd.exceptions import NumericalError, ShapeError
from cmkd.losses import concordance
from cmkd.schemas import MetricSummary, Task

DEC_METRICS = ("accuracy", "macro_f1")
CER_METRICS = ("rmse", "pcc", "ccc")


def _pair(pred: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(pred).ravel(), np.asarray(y).ravel()
    if a.shape != b.shape:
        raise ShapeError(
            f"length mismatch: {a.shape[0]} predictions, {b.shape[0]} labels"
        )
    return a, b


def _classes(
    pred: Sequence[int], y: Sequence[int], c: int
) -> tuple[np.ndarray, np.ndarray]:
    a, b = _pair(pred, y)
    a, b = a.astype(np.int64), b.astype(np.int64)
    if np.any((a < 0) | (a >= c)) or np.any((b < 0) | (b >= c)):
        raise ShapeError(f"class indices must lie in [0, {c})")
    return a, b


def accuracy(pred: Sequence[int], y: Sequence[int]) -> float:
    a, b = _pair(pred, y)
    if a.size == 0:
        raise ShapeError("accuracy of an empty set")
    return float(accuracy_score(b, a))


def confusion_matrix(pred: Sequence[int], y: Sequence[int], c: int) -> np.ndarray:
    """cm[true, predicted]"""
    a, b = _classes(pred, y, c)
    return sk_confusion_matrix(b, a, labels=np.arange(c)).astype(np.int64)


def macro_f1(pred: Sequence[int], y: Sequence[int], c: int) -> float:
    """
    Unweighted mean of per-class F1 over classes that occur in either the
    predictions or the labels; a class with support but no true positive
    scores 0.
    """
    a, b = _classes(pred, y, c)
    if a.size == 0:
        raise ShapeError("macro_f1 of an empty set")
    present = np.union1d(a, b)
    return float(f1_score(b, a, labels=present, average="macro", zero_division=0))


def rmse(pred: Sequence[float], y: Sequence[float]) -> float:
    a, b = _pair(pred, y)
    if a.size < 2:
        raise ShapeError("rmse needs at least 2 samples")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pcc(pred: Sequence[float], y: Sequence[float]) -> float:
    a, b = _pair(pred, y)
    if a.size < 2:
        raise ShapeError("pcc needs at least 2 samples")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise NumericalError("pcc is undefined for a constant series")
    return float(pearsonr(a, b).statistic)


def ccc(pred: Sequence[float], y: Sequence[float]) -> float:
    a, b = _pair(pred, y)
    return concordance(a.astype(np.float64), b.astype(np.float64)).item()


def task_metrics(
    task: Task, outputs: np.ndarray, y: np.ndarray, num_classes: int = 0
) -> dict[str, float]:
    """Metrics from raw head outputs: logits for DEC, values for CER."""
    if task is Task.DEC:
        pred = np.argmax(outputs, axis=1)
        return {
            "accuracy": accuracy(pred, y),
            "macro_f1": macro_f1(pred, y, num_classes),
        }
    values = np.asarray(outputs).ravel()
    result = {"rmse": rmse(values, y)}
    # constant predictions leave the correlations undefined; report 0
    try:
        result["pcc"] = pcc(values, y)
    except NumericalError:
        result["pcc"] = 0.0
    try:
        result["ccc"] = ccc(values, y)
    except NumericalError:
        result["ccc"] = 0.0
    return result


def primary_metric(task: Task) -> tuple[str, str]:
    """(name, mode) of the metric used to rank epochs and runs."""
    return ("accuracy", "max") if task is Task.DEC else ("rmse", "min")


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and sample (ddof=1) standard deviation; std is 0 for one value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("cannot summarize an empty list")
    if arr.size == 1 or np.all(arr == arr[0]):
        std = 0.0
    else:
        std = float(np.std(arr, ddof=1))
    return MetricSummary(mean=float(np.mean(arr)), std=std, values=arr.tolist())


def aggregate(records: Sequence[dict[str, float]]) -> dict[str, MetricSummary]:
    if not records:
        return {}
    names = list(records[0])
    return {name: summarize([r[name] for r in records]) for name in names}
