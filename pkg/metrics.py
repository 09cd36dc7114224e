# ==================================================
# File: metrics.py
# ROC AUC by exact pair counting; F1 and confusion matrices from scikit-learn
# ==================================================

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from sklearn import metrics as skm

from errors import MetricError


@dataclass
class EvalResult:
    auc: float
    weighted_f1: float
    confusion: np.ndarray
    per_slide: pd.DataFrame = field(repr=False)
    per_class_f1: List[float] = field(default_factory=list)
    accuracy: float = 0.0

    def summary(self) -> Dict:
        return {
            'auc': self.auc,
            'weighted_f1': self.weighted_f1,
            'accuracy': self.accuracy,
            'per_class_f1': list(self.per_class_f1),
            'confusion': self.confusion.tolist(),
        }


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score+ > score-) + 0.5 P(tie) over every positive/negative pair"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    if positives.size == 0 or negatives.size == 0:
        raise MetricError("AUC needs both classes present")
    if positives.size + negatives.size != labels.size:
        raise MetricError("binary AUC labels must be 0 or 1")

    diff = positives[:, None] - negatives[None, :]
    wins = np.count_nonzero(diff > 0)
    ties = np.count_nonzero(diff == 0)
    return (wins + 0.5 * ties) / (positives.size * negatives.size)


def macro_ovr_auc(probabilities: np.ndarray, labels: Sequence[int]) -> float:
    """Unweighted mean of one-vs-rest AUCs over classes present in labels"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.ndim != 2 or probabilities.shape[0] != labels.size:
        raise MetricError(f"probability matrix {probabilities.shape} does not match {labels.size} labels")
    aucs = []
    for c in range(probabilities.shape[1]):
        positive = labels == c
        if positive.all() or not positive.any():
            continue
        aucs.append(roc_auc(probabilities[:, c], positive.astype(int)))
    if not aucs:
        raise MetricError("AUC needs at least two classes present")
    return float(np.mean(aucs))


def _check_classes(predictions: Sequence[int], labels: Sequence[int], num_classes: int):
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise MetricError("predictions and labels differ in length")
    if predictions.size and (min(predictions.min(), labels.min()) < 0
                             or max(predictions.max(), labels.max()) >= num_classes):
        raise MetricError(f"class index outside [0, {num_classes})")
    return predictions, labels


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """rows = true class, columns = predicted class"""
    predictions, labels = _check_classes(predictions, labels, num_classes)
    if labels.size == 0:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    return skm.confusion_matrix(labels, predictions, labels=list(range(num_classes))).astype(np.int64)


def per_class_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """2PR/(P+R), with 0 wherever P+R is 0"""
    predictions, labels = _check_classes(predictions, labels, num_classes)
    if labels.size == 0:
        return np.zeros(num_classes)
    return skm.f1_score(labels, predictions, labels=list(range(num_classes)), average=None, zero_division=0)


def weighted_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> float:
    predictions, labels = _check_classes(predictions, labels, num_classes)
    if labels.size == 0:
        return 0.0
    return float(skm.f1_score(labels, predictions, labels=list(range(num_classes)),
                              average='weighted', zero_division=0))


def evaluate_predictions(slide_ids: Sequence[str], labels: Sequence[int],
                         probabilities: np.ndarray, num_classes: int) -> EvalResult:
    """Binary AUC uses P(class 1); multiclass uses macro one-vs-rest"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.argmax(probabilities, axis=1)

    if num_classes == 2:
        scores = probabilities[:, 1]
        auc = roc_auc(scores, labels)
    else:
        scores = probabilities[np.arange(labels.size), predictions]
        auc = macro_ovr_auc(probabilities, labels)

    per_slide = pd.DataFrame({
        'slide_id': list(slide_ids),
        'label': labels,
        'predicted': predictions,
        'score': scores,
    })
    return EvalResult(
        auc=float(auc),
        weighted_f1=weighted_f1(predictions, labels, num_classes),
        confusion=confusion_matrix(predictions, labels, num_classes),
        per_slide=per_slide,
        per_class_f1=per_class_f1(predictions, labels, num_classes).tolist(),
        accuracy=float(np.mean(predictions == labels)) if labels.size else 0.0,
    )
