"""
Loss Module for SDHSI-Net
Teacher and student cross-entropy, logit distillation, normalized-feature hint loss,
batch-hard triplet mining and the weighted total objective.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from core import ndtensor as nd
from core.errors import ConfigError, ContractError, DimensionError
from core.layers import Mode
from core.ndtensor import Tensor

logger = logging.getLogger(__name__)

NORM_EPSILON = 1e-12

Triplet = Tuple[int, int, int]


# LOSS RECORDS
@dataclass
class LossWeights:
    lambda_ce: float = 1.0
    lambda_logit: float = 1e-5
    lambda_hint: float = 0.001
    lambda_trip: float = 0.001
    margin: float = 0.2

    def validate(self):
        for name in ("lambda_ce", "lambda_logit", "lambda_hint", "lambda_trip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.margin <= 0:
            raise ConfigError(f"triplet margin must be positive, got {self.margin}")


@dataclass
class LossReport:
    ce_teacher: float = 0.0
    ce_s1: float = 0.0
    ce_s2: float = 0.0
    logit_s1: float = 0.0
    logit_s2: float = 0.0
    hint_s1: float = 0.0
    hint_s2: float = 0.0
    triplet: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def weighted_total(self, weights: LossWeights) -> float:
        """Recompute the total from the per-term values"""
        return (weights.lambda_ce * self.ce_teacher + self.ce_s1 + self.ce_s2
                + weights.lambda_logit * (self.logit_s1 + self.logit_s2)
                + weights.lambda_hint * (self.hint_s1 + self.hint_s2)
                + weights.lambda_trip * self.triplet)


def _check_same_shape(a: Tensor, b: Tensor, label: str):
    if a.shape != b.shape:
        raise DimensionError(f"{label}: teacher {a.shape} and student {b.shape} differ")


# CLASSIFICATION
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the labels under softmax(logits)"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects N x K logits and N labels, got {logits.shape} and {labels.shape}")
    classes = logits.shape[1]
    bad = labels[(labels < 0) | (labels >= classes)]
    if bad.size:
        raise ContractError(f"labels {sorted(set(bad.tolist()))} out of range for {classes} classes")
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    one_hot[np.arange(labels.size), labels] = 1.0
    picked = nd.sum(nd.log_softmax(logits, axis=1) * Tensor(one_hot))
    return -picked * (1.0 / labels.size)


# DISTILLATION
def logit_distillation(z_teacher: Tensor, z_student: Tensor) -> Tensor:
    """Per-sample squared L2 logit gap averaged over the batch; teacher side gets no gradient"""
    _check_same_shape(z_teacher, z_student, "logit_distillation")
    gap = z_teacher.detach() - z_student
    return nd.sum(nd.square(gap)) * (1.0 / z_student.shape[0])


def _normalize_rows(features: Tensor) -> Tensor:
    norms = nd.sqrt(nd.sum(nd.square(features), axis=1, keepdims=True) + NORM_EPSILON ** 2)
    return features / nd.broadcast_to(norms, features.shape)


def hint_loss(f_teacher: Tensor, f_student: Tensor) -> Tensor:
    """Squared L2 gap between unit-normalized feature rows, averaged over the batch"""
    _check_same_shape(f_teacher, f_student, "hint_loss")
    gap = _normalize_rows(f_teacher.detach()) - _normalize_rows(f_student)
    return nd.sum(nd.square(gap)) * (1.0 / f_student.shape[0])


# METRIC LEARNING
def _squared_distances(embeddings: np.ndarray) -> np.ndarray:
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def mine_triplets(embeddings, labels) -> List[Triplet]:
    """Batch-hard mining: farthest same-class positive, nearest other-class negative.

    Anchors lacking either a positive or a negative are skipped. argmax/argmin resolve ties
    to the lowest index.
    """
    values = embeddings.values if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    labels = np.asarray(labels)
    distances = _squared_distances(values.astype(np.float64))
    triples = []
    for anchor in range(labels.size):
        same = labels == labels[anchor]
        same[anchor] = False
        other = labels != labels[anchor]
        if not same.any() or not other.any():
            continue
        positive = int(np.argmax(np.where(same, distances[anchor], -np.inf)))
        negative = int(np.argmin(np.where(other, distances[anchor], np.inf)))
        triples.append((anchor, positive, negative))
    return triples


def triplet_loss(embeddings: Tensor, triples: List[Triplet], margin: float = 0.2) -> Tensor:
    if not triples:
        return Tensor(np.zeros((), dtype=embeddings.dtype))
    anchors, positives, negatives = (np.array(column) for column in zip(*triples))
    a = nd.take(embeddings, anchors)
    d_pos = nd.sum(nd.square(a - nd.take(embeddings, positives)), axis=1)
    d_neg = nd.sum(nd.square(a - nd.take(embeddings, negatives)), axis=1)
    return nd.mean(nd.relu(d_pos - d_neg + margin))


# TOTAL OBJECTIVE
def total_loss(bundle, labels, weights: LossWeights, no_sd: bool = False) -> Tuple[Tensor, LossReport]:
    """Weighted sum of every training objective for one train-mode forward bundle.

    no_sd keeps only the teacher cross-entropy and the triplet term, so students get no signal.
    """
    if bundle.mode is not Mode.TRAIN:
        raise ContractError("total_loss needs a train-mode forward bundle")
    if not no_sd and not bundle.has_students:
        raise ContractError("total_loss needs student outputs unless no_sd is set")

    report = LossReport()
    ce_teacher = cross_entropy(bundle.teacher_logits, labels)
    report.ce_teacher = ce_teacher.item()
    total = ce_teacher * weights.lambda_ce

    triples = mine_triplets(bundle.teacher_embedding, labels)
    triplet = triplet_loss(bundle.teacher_embedding, triples, weights.margin)
    report.triplet = triplet.item()
    total = total + triplet * weights.lambda_trip

    if not no_sd:
        student_terms = (
            ("s1", bundle.student1_logits, bundle.student1_hidden),
            ("s2", bundle.student2_logits, bundle.student2_hidden),
        )
        for tag, logits, hidden in student_terms:
            ce = cross_entropy(logits, labels)
            logit = logit_distillation(bundle.teacher_logits, logits)
            hint = hint_loss(bundle.teacher_embedding, hidden)
            setattr(report, f"ce_{tag}", ce.item())
            setattr(report, f"logit_{tag}", logit.item())
            setattr(report, f"hint_{tag}", hint.item())
            total = total + ce + logit * weights.lambda_logit + hint * weights.lambda_hint

    report.total = total.item()
    return total, report
