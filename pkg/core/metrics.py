"""
Metrics Module
Confusion matrix (rows = ground truth, columns = prediction) and the accuracy
figures derived from it: overall accuracy, average per-class recall and Cohen's kappa.
"""

from dataclasses import dataclass
from typing import Dict

import numpy as np

from core.errors import ContractError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_recall(self) -> np.ndarray:
        """Recall per class; NaN where the class has no ground-truth samples"""
        support = self.counts.sum(axis=1).astype(np.float64)
        recall = np.full(self.num_classes, np.nan)
        present = support > 0
        recall[present] = np.diag(self.counts)[present] / support[present]
        return recall


@dataclass
class Scores:
    oa: float
    aa: float
    kappa: float

    def to_dict(self) -> Dict[str, float]:
        return {"oa": self.oa, "aa": self.aa, "kappa": self.kappa}


def confusion(predictions, labels, num_classes: int) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.size != labels.size:
        raise ContractError(f"{predictions.size} predictions for {labels.size} labels")
    for label, values in (("prediction", predictions), ("label", labels)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ContractError(f"{label} values must lie in 0..{num_classes - 1}, got {values.min()}..{values.max()}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def _require_samples(cm: ConfusionMatrix, name: str):
    if cm.total == 0:
        raise ContractError(f"{name} is undefined on an empty confusion matrix")


def oa(cm: ConfusionMatrix) -> float:
    _require_samples(cm, "overall accuracy")
    return float(np.trace(cm.counts) / cm.total)


def aa(cm: ConfusionMatrix) -> float:
    """Mean recall over classes present in the ground truth"""
    _require_samples(cm, "average accuracy")
    recall = cm.per_class_recall()
    return float(np.mean(recall[~np.isnan(recall)]))


def kappa(cm: ConfusionMatrix) -> float:
    _require_samples(cm, "kappa")
    total = float(cm.total)
    observed = np.trace(cm.counts) / total
    expected = float(np.sum(cm.counts.sum(axis=1) * cm.counts.sum(axis=0))) / total ** 2
    if expected == 1.0:
        return 0.0
    return float((observed - expected) / (1.0 - expected))


def scores(cm: ConfusionMatrix) -> Scores:
    return Scores(oa(cm), aa(cm), kappa(cm))
