import math

import numpy as np
import pytest

from core import ndtensor as nd
from core.errors import ConfigError, ContractError, DimensionError
from core.layers import Mode
from core.losses import (
    LossWeights,
    cross_entropy,
    hint_loss,
    logit_distillation,
    mine_triplets,
    total_loss,
    triplet_loss,
)
from core.model import ForwardBundle
from core.ndtensor import Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def make_bundle(rng, n=6, classes=3, width=4, mode=Mode.TRAIN, students=True):
    def part(shape):
        return leaf(rng.normal(size=shape))

    return ForwardBundle(
        mode=mode,
        teacher_logits=part((n, classes)),
        student1_logits=part((n, classes)) if students else None,
        student2_logits=part((n, classes)) if students else None,
        teacher_embedding=part((n, width)),
        student1_hidden=part((n, width)) if students else None,
        student2_hidden=part((n, width)) if students else None,
    )


# CROSS-ENTROPY
def test_cross_entropy_of_uniform_logits_is_log_k():
    assert cross_entropy(leaf(np.zeros((3, 5))), [0, 4, 2]).item() == pytest.approx(math.log(5))


def test_cross_entropy_hand_value():
    expected = math.log(math.exp(2) + math.exp(1) + 1) - 2
    assert cross_entropy(leaf([[2.0, 1.0, 0.0]]), [0]).item() == pytest.approx(expected)


def test_cross_entropy_gradient_is_softmax_minus_one_hot(rng):
    logits = leaf(rng.normal(size=(4, 3)))
    labels = np.array([2, 0, 1, 1])
    nd.backward(cross_entropy(logits, labels))
    probs = np.exp(logits.values) / np.exp(logits.values).sum(axis=1, keepdims=True)
    assert np.allclose(logits.grad, (probs - np.eye(3)[labels]) / 4)


def test_cross_entropy_label_errors():
    with pytest.raises(ContractError, match=r"\[3\]"):
        cross_entropy(leaf(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ContractError):
        cross_entropy(leaf(np.zeros((2, 3))), [-1, 0])
    with pytest.raises(DimensionError):
        cross_entropy(leaf(np.zeros((2, 3))), [0, 1, 2])


# DISTILLATION
def test_logit_distillation_averages_per_sample_squared_gap():
    teacher = leaf([[1.0, 2.0], [0.0, 0.0]])
    student = leaf([[0.0, 0.0], [3.0, 0.0]])
    assert logit_distillation(teacher, student).item() == pytest.approx((5.0 + 9.0) / 2)


def test_logit_distillation_blocks_teacher_gradient():
    teacher = leaf([[1.0, 2.0]])
    student = leaf([[0.0, 1.0]])
    nd.backward(logit_distillation(teacher, student))
    assert teacher.grad is None
    assert np.allclose(student.grad, [[-2.0, -2.0]])


def test_hint_loss_ignores_scale_and_measures_direction():
    teacher = leaf([[1.0, 0.0], [0.0, 2.0]])
    assert hint_loss(teacher, leaf([[5.0, 0.0], [0.0, 0.1]])).item() == pytest.approx(0.0, abs=1e-12)
    assert hint_loss(teacher, leaf([[0.0, 1.0], [3.0, 0.0]])).item() == pytest.approx(2.0)


def test_hint_loss_is_finite_for_zero_rows():
    teacher = leaf([[1.0, 0.0]])
    student = leaf([[0.0, 0.0]])
    loss = hint_loss(teacher, student)
    nd.backward(loss)
    assert loss.item() == pytest.approx(1.0)
    assert np.all(np.isfinite(student.grad))
    assert teacher.grad is None


def test_distillation_terms_check_shapes():
    with pytest.raises(DimensionError):
        logit_distillation(leaf(np.zeros((2, 3))), leaf(np.zeros((2, 4))))
    with pytest.raises(DimensionError):
        hint_loss(leaf(np.zeros((2, 3))), leaf(np.zeros((3, 3))))


# TRIPLETS
LINE = [[0.0], [1.0], [3.0], [10.0]]
LINE_LABELS = [0, 0, 1, 1]


def test_batch_hard_mining_on_a_line():
    assert mine_triplets(np.array(LINE), LINE_LABELS) == [(0, 1, 2), (1, 0, 2), (2, 3, 1), (3, 2, 1)]


def test_mining_skips_anchors_without_positive_or_negative():
    assert mine_triplets(np.array([[0.0], [1.0], [2.0]]), [0, 1, 1]) == [(1, 2, 0), (2, 1, 0)]
    assert mine_triplets(np.array([[0.0], [1.0]]), [1, 1]) == []


def test_mining_breaks_ties_toward_lowest_index():
    embeddings = np.array([[0.0], [1.0], [-1.0], [1.0], [-1.0]])
    triples = mine_triplets(embeddings, [0, 0, 0, 1, 1])
    assert triples[0] == (0, 1, 3)


def test_triplet_loss_hand_value():
    embeddings = leaf(LINE)
    loss = triplet_loss(embeddings, mine_triplets(embeddings, LINE_LABELS), margin=0.2)
    assert loss.item() == pytest.approx(45.2 / 4)


def test_triplet_loss_without_triples_is_zero():
    loss = triplet_loss(leaf([[1.0], [2.0]]), [], margin=0.2)
    assert loss.shape == ()
    assert loss.item() == 0.0


def test_triplet_loss_is_translation_invariant(rng):
    embeddings = rng.normal(size=(8, 3))
    labels = rng.integers(0, 3, size=8)
    shifted = embeddings + rng.normal(size=(1, 3))
    base = triplet_loss(leaf(embeddings), mine_triplets(embeddings, labels))
    moved = triplet_loss(leaf(shifted), mine_triplets(shifted, labels))
    assert moved.item() == pytest.approx(base.item(), rel=1e-9, abs=1e-12)


# TOTAL OBJECTIVE
def test_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_hint=-1.0).validate()
    with pytest.raises(ConfigError):
        LossWeights(margin=0.0).validate()


def test_report_total_matches_weighted_terms(rng):
    weights = LossWeights(1.0, 0.1, 0.2, 0.3)
    total, report = total_loss(make_bundle(rng), rng.integers(0, 3, size=6), weights)
    assert total.item() == pytest.approx(report.total)
    assert report.weighted_total(weights) == pytest.approx(report.total, rel=1e-9)
    assert set(report.to_dict()) >= {"ce_teacher", "hint_s2", "triplet", "total"}


def test_no_sd_drops_student_terms(rng):
    bundle = make_bundle(rng, students=False)
    labels = np.array([0, 1, 2, 0, 1, 2])
    total, report = total_loss(bundle, labels, LossWeights(), no_sd=True)
    assert report.ce_s1 == report.logit_s2 == report.hint_s1 == 0.0
    expected = report.ce_teacher + 0.001 * report.triplet
    assert total.item() == pytest.approx(expected)


def test_total_loss_contract_errors(rng):
    labels = np.zeros(6, dtype=np.int64)
    with pytest.raises(ContractError):
        total_loss(make_bundle(rng, mode=Mode.EVAL), labels, LossWeights())
    with pytest.raises(ContractError):
        total_loss(make_bundle(rng, students=False), labels, LossWeights())


def test_student_terms_send_no_gradient_to_teacher_outputs(rng):
    bundle = make_bundle(rng)
    weights = LossWeights(lambda_ce=0.0, lambda_logit=1.0, lambda_hint=1.0, lambda_trip=0.0)
    total, _ = total_loss(bundle, np.array([0, 1, 2, 0, 1, 2]), weights)
    nd.backward(total)
    for tensor in (bundle.teacher_logits, bundle.teacher_embedding):
        assert tensor.grad is None or np.allclose(tensor.grad, 0.0)
    assert not np.allclose(bundle.student1_hidden.grad, 0.0)


# BRUTE-FORCE ORACLES
SEEDS = range(20)


def random_batch(rng, min_n=2, max_n=10):
    n = int(rng.integers(min_n, max_n + 1))
    classes = int(rng.integers(2, 5))
    width = int(rng.integers(1, 6))
    return n, classes, width


def naive_squared_distance(u, v) -> float:
    return sum((float(a) - float(b)) ** 2 for a, b in zip(u, v))


def naive_unit(row):
    norm = math.sqrt(sum(float(v) ** 2 for v in row) + 1e-24)
    return [float(v) / norm for v in row]


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    n, classes, _ = random_batch(rng)
    logits = rng.normal(scale=3.0, size=(n, classes))
    labels = rng.integers(0, classes, size=n)
    expected = 0.0
    for row, label in zip(logits, labels):
        top = max(row)
        expected -= row[label] - top - math.log(sum(math.exp(v - top) for v in row))
    expected /= n
    assert cross_entropy(leaf(logits), labels).item() == pytest.approx(expected, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_logit_distillation_matches_naive_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n, classes, _ = random_batch(rng)
    teacher, student = rng.normal(size=(n, classes)), rng.normal(size=(n, classes))
    expected = sum(naive_squared_distance(t, s) for t, s in zip(teacher, student)) / n
    assert logit_distillation(leaf(teacher), leaf(student)).item() == pytest.approx(expected, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_hint_loss_matches_naive_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    n, _, width = random_batch(rng)
    teacher, student = rng.normal(size=(n, width)), rng.normal(size=(n, width))
    expected = sum(naive_squared_distance(naive_unit(t), naive_unit(s)) for t, s in zip(teacher, student)) / n
    assert hint_loss(leaf(teacher), leaf(student)).item() == pytest.approx(expected, rel=1e-9, abs=1e-9)


def exhaustive_triplets(embeddings, labels):
    """Every (anchor, positive, negative) triple; per anchor keep the farthest positive, then the nearest negative"""
    best = {}
    n = len(labels)
    for anchor in range(n):
        for positive in range(n):
            if positive == anchor or labels[positive] != labels[anchor]:
                continue
            for negative in range(n):
                if labels[negative] == labels[anchor]:
                    continue
                key = (-naive_squared_distance(embeddings[anchor], embeddings[positive]),
                       naive_squared_distance(embeddings[anchor], embeddings[negative]), positive, negative)
                if anchor not in best or key < best[anchor][0]:
                    best[anchor] = (key, (anchor, positive, negative))
    return [best[anchor][1] for anchor in sorted(best)]


@pytest.mark.parametrize("seed", SEEDS)
def test_triplet_mining_and_loss_match_exhaustive_oracle(seed):
    rng = np.random.default_rng(300 + seed)
    n, classes, width = random_batch(rng, 3, 12)
    embeddings = rng.normal(size=(n, width))
    labels = rng.integers(0, classes, size=n)
    triples = mine_triplets(embeddings, labels)
    assert triples == exhaustive_triplets(embeddings, labels)

    margin = float(rng.uniform(0.1, 1.0))
    hinges = [max(0.0, naive_squared_distance(embeddings[a], embeddings[p])
                  - naive_squared_distance(embeddings[a], embeddings[q]) + margin) for a, p, q in triples]
    expected = sum(hinges) / len(hinges) if hinges else 0.0
    assert triplet_loss(leaf(embeddings), triples, margin).item() == pytest.approx(expected, rel=1e-9, abs=1e-9)


# INVARIANCES
def test_hint_loss_is_scale_invariant_on_random_cases():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n, _, width = random_batch(rng, 1, 8)
        teacher, student = rng.normal(size=(n, width)), rng.normal(size=(n, width))
        scale_teacher, scale_student = 10.0 ** rng.uniform(-2, 2, size=2)
        base = hint_loss(leaf(teacher), leaf(student)).item()
        scaled = hint_loss(leaf(teacher * scale_teacher), leaf(student * scale_student)).item()
        assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_triplet_loss_is_translation_invariant_on_random_cases():
    rng = np.random.default_rng(2025)
    for _ in range(100):
        n, classes, width = random_batch(rng, 3, 10)
        embeddings = rng.normal(size=(n, width))
        labels = rng.integers(0, classes, size=n)
        shifted = embeddings + rng.normal(scale=5.0, size=(1, width))
        assert mine_triplets(shifted, labels) == mine_triplets(embeddings, labels)
        base = triplet_loss(leaf(embeddings), mine_triplets(embeddings, labels)).item()
        moved = triplet_loss(leaf(shifted), mine_triplets(shifted, labels)).item()
        assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)
