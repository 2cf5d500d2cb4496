#!/usr/bin/env python3
"""Tests for confusion matrices, macro metrics and federation averages."""

import numpy as np
import pytest

from conftest import SMALL_DIMS, make_dataset
from src.fedbench.kpi import (
    ModelEvaluator,
    average_over_participants,
    convergence_round,
    confusion,
    first_round_reaching,
    metrics_from_confusion,
)
from src.fedbench.models import KpiSample
from src.fedbench.nn import init_model, zeros_model


def brute_force_metrics(predictions, labels, n_classes):
    precisions, recalls, f1s = [], [], []
    for c in range(n_classes):
        tp = sum(1 for p, t in zip(predictions, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(predictions, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(predictions, labels) if p != c and t == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    accuracy = sum(1 for p, t in zip(predictions, labels) if p == t) / len(labels)
    return (
        accuracy,
        sum(precisions) / n_classes,
        sum(recalls) / n_classes,
        sum(f1s) / n_classes,
    )


def test_metrics_match_brute_force():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n_classes = int(rng.integers(2, 11))
        n = int(rng.integers(1, 60))
        labels = rng.integers(0, n_classes, size=n).tolist()
        predictions = rng.integers(0, n_classes, size=n).tolist()
        expected = brute_force_metrics(predictions, labels, n_classes)
        got = metrics_from_confusion(confusion(predictions, labels, n_classes))
        for a, b in zip(got, expected):
            assert abs(a - b) <= 1e-12


def test_all_one_class_predictions():
    labels = [c for c in range(10) for _ in range(10)]
    accuracy, precision, recall, f1 = metrics_from_confusion(confusion([0] * 100, labels))
    assert accuracy == pytest.approx(0.1)
    assert precision == pytest.approx(0.01)
    assert recall == pytest.approx(0.1)
    assert f1 == pytest.approx(0.018181818, abs=1e-8)


def test_perfect_predictions():
    labels = list(range(10)) * 3
    assert metrics_from_confusion(confusion(labels, labels)) == (1.0, 1.0, 1.0, 1.0)


def test_confusion_counts():
    cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], n_classes=3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
    assert cm.total == 4 and cm.trace == 3


def test_empty_confusion_rejected():
    with pytest.raises(ValueError):
        metrics_from_confusion(confusion([], []))


def test_confusion_rejects_bad_input():
    with pytest.raises(ValueError):
        confusion([0, 1], [0])
    with pytest.raises(ValueError):
        confusion([0, 10], [0, 1])


def _sample(node, round_index=1, accuracy=0.5, **kwargs):
    return KpiSample(
        node=node,
        round=round_index,
        accuracy=accuracy,
        precision=kwargs.get("precision", 0.4),
        recall=kwargs.get("recall", 0.3),
        f1=kwargs.get("f1", 0.2),
        loss=kwargs.get("loss", 1.5),
        bytes_sent=kwargs.get("bytes_sent", 10),
        bytes_received=kwargs.get("bytes_received", 20),
        flops=kwargs.get("flops", 100),
    )


def test_average_over_participants():
    samples = [_sample(0, accuracy=0.2), _sample(1, accuracy=0.4), _sample(2, accuracy=0.9)]
    fed = average_over_participants(samples)
    assert fed.node is None
    assert fed.round == 1
    assert fed.accuracy == pytest.approx(0.5)
    assert fed.bytes_sent == 30
    assert fed.bytes_received == 60
    assert fed.flops == 300
    assert average_over_participants(list(reversed(samples))) == fed


def test_average_rejects_empty_and_mixed_rounds():
    with pytest.raises(ValueError):
        average_over_participants([])
    with pytest.raises(ValueError):
        average_over_participants([_sample(0, round_index=1), _sample(1, round_index=2)])


def test_evaluator_caches_identical_models():
    test = make_dataset(60, seed=5)
    evaluator = ModelEvaluator(test)
    model = init_model(SMALL_DIMS, seed=1)
    first = evaluator.evaluate(model)
    second = evaluator.evaluate(model.copy())
    assert first == second
    assert evaluator.misses == 1 and evaluator.hits == 1
    evaluator.evaluate(init_model(SMALL_DIMS, seed=2))
    assert evaluator.misses == 2


def test_evaluator_zero_model():
    evaluator = ModelEvaluator(make_dataset(100, seed=5))
    accuracy, _, _, _, loss = evaluator.evaluate(zeros_model(SMALL_DIMS))
    assert loss == pytest.approx(np.log(10), abs=1e-6)
    assert 0.0 <= accuracy <= 1.0


def test_evaluator_sample_carries_counters():
    evaluator = ModelEvaluator(make_dataset(30, seed=5))
    sample = evaluator.sample(2, 4, init_model(SMALL_DIMS, seed=1), bytes_sent=7, flops=9)
    assert (sample.node, sample.round, sample.bytes_sent, sample.bytes_received, sample.flops) == (2, 4, 7, 0, 9)


def test_first_round_reaching():
    assert first_round_reaching([0.1, 0.5, 0.91, 0.95], 0.9) == 2
    assert first_round_reaching([0.1, 0.5], 0.9) is None


def test_convergence_round_of_record(tiny_record):
    assert convergence_round(tiny_record, 0.01) == 0
    accuracies = [r.federation.accuracy for r in tiny_record.rounds]
    expected = next((i for i, a in enumerate(accuracies) if a >= 0.999999), None)
    assert convergence_round(tiny_record, 0.999999) == expected
