import math
from collections.abc import Sequence

import numpy as np
from scipy import stats
from sklearn.metrics import confusion_matrix, f1_score

from src.tools.models import NUM_CLASSES


def macro_f1(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """Unweighted mean F1.

    Averages over the union of classes present in ``y_true`` and ``y_pred``; a class
    predicted but never true scores 0 and still counts.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("no samples to score")
    labels = np.union1d(y_true, y_pred)
    return float(f1_score(y_true, y_pred, labels=labels, average="macro", zero_division=0))


def weighted_f1(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    labels = np.union1d(y_true, y_pred)
    return float(f1_score(y_true, y_pred, labels=labels, average="weighted", zero_division=0))


def per_class_f1(
    y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = NUM_CLASSES
) -> list[float]:
    scores = f1_score(
        y_true, y_pred, labels=list(range(num_classes)), average=None, zero_division=0
    )
    return [float(s) for s in scores]


def confusion(
    y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = NUM_CLASSES
) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    return confusion_matrix(y_true, y_pred, labels=list(range(num_classes)))


def confidence_interval(scores: Sequence[float], level: float = 0.90) -> tuple[float, float]:
    """Student-t interval: mean +- t_{(1+level)/2, n-1} * s / sqrt(n)."""
    values = np.asarray(scores, dtype=np.float64)
    if values.size < 2:
        raise ValueError("a confidence interval needs at least 2 scores")
    if not 0 < level < 1:
        raise ValueError(f"confidence level {level} outside (0, 1)")
    mean = float(values.mean())
    spread = float(values.std(ddof=1))
    quantile = float(stats.t.ppf((1 + level) / 2, values.size - 1))
    return mean, quantile * spread / math.sqrt(values.size)
