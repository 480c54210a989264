import numpy as np
import pytest

from core.errors import ContractError
from core.metrics import ConfusionMatrix, aa, confusion, kappa, oa, scores


def test_confusion_rows_are_ground_truth():
    cm = confusion([0, 1, 1, 2], [0, 0, 1, 2], 3)
    assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]
    assert cm.total == 4


def test_two_class_example():
    cm = ConfusionMatrix(np.array([[4, 1], [2, 3]]))
    assert oa(cm) == pytest.approx(0.7)
    assert aa(cm) == pytest.approx((0.8 + 0.6) / 2)
    assert kappa(cm) == pytest.approx(0.4, abs=1e-12)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    result = scores(confusion(labels, labels, 3))
    assert result.to_dict() == {"oa": 1.0, "aa": 1.0, "kappa": 1.0}


def test_single_class_agreement_gives_zero_kappa():
    cm = confusion([1, 1, 1], [1, 1, 1], 3)
    assert oa(cm) == 1.0
    assert kappa(cm) == 0.0


def test_average_accuracy_skips_absent_classes():
    cm = confusion([0, 0, 2, 1], [0, 0, 2, 2], 3)
    recall = cm.per_class_recall()
    assert np.isnan(recall[1])
    assert aa(cm) == pytest.approx((1.0 + 0.5) / 2)


def test_chance_level_predictions_have_zero_kappa():
    cm = ConfusionMatrix(np.array([[25, 25], [25, 25]]))
    assert kappa(cm) == pytest.approx(0.0)


def test_confusion_errors():
    with pytest.raises(ContractError):
        confusion([0, 1], [0], 2)
    with pytest.raises(ContractError):
        confusion([0, 2], [0, 1], 2)
    with pytest.raises(ContractError):
        confusion([0, 1], [-1, 1], 2)
    with pytest.raises(ContractError):
        oa(confusion([], [], 2))


def brute_force(labels, predictions, classes):
    n = len(labels)
    agree = sum(1 for t, p in zip(labels, predictions) if t == p)
    chance = sum(
        sum(1 for t in labels if t == k) * sum(1 for p in predictions if p == k) for k in range(classes)
    ) / n ** 2
    recalls = []
    for k in range(classes):
        members = [p for t, p in zip(labels, predictions) if t == k]
        if members:
            recalls.append(sum(1 for p in members if p == k) / len(members))
    po = agree / n
    return po, sum(recalls) / len(recalls), (0.0 if chance == 1.0 else (po - chance) / (1 - chance))


def test_scores_match_brute_force_on_random_matrices():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        classes = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        labels = rng.integers(0, classes, size=n)
        noisy = rng.random(n) < rng.random()
        predictions = np.where(noisy, rng.integers(0, classes, size=n), labels)
        expected = brute_force(labels.tolist(), predictions.tolist(), classes)
        result = scores(confusion(predictions, labels, classes))
        assert (result.oa, result.aa, result.kappa) == pytest.approx(expected, abs=1e-12)
