"""KPI computation: confusion matrices, macro metrics, federation averages."""

import math
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .defaults import KpiNames
from .mnist import LabeledDataset
from .models import KpiSample, RunRecord
from .nn import MlpModel, mean_cross_entropy, predict


@dataclass(eq=False)
class ConfusionMatrix:
    """Counts indexed by (true class, predicted class)."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])


def confusion(predictions: Sequence[int], labels: Sequence[int], n_classes: int = KpiNames.N_CLASSES) -> ConfusionMatrix:
    """
    Tally predictions against labels.

    Args:
        predictions: Predicted class per sample
        labels: True class per sample
        n_classes: Number of classes

    Returns:
        Confusion matrix

    Raises:
        ValueError: Length mismatch or class out of range
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(pred) != len(true):
        raise ValueError(f"{len(pred)} predictions for {len(true)} labels")
    for name, values in (("prediction", pred), ("label", true)):
        if len(values) and (values.min() < 0 or values.max() >= n_classes):
            bad = values[(values < 0) | (values >= n_classes)][0]
            raise ValueError(f"{name} {bad} out of range 0..{n_classes - 1}")
    counts = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts=counts.reshape(n_classes, n_classes).astype(np.int64))


def per_class_metrics(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (precision, recall, f1); empty denominators give 0."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def metrics_from_confusion(cm: ConfusionMatrix) -> Tuple[float, float, float, float]:
    """
    Accuracy and macro-averaged precision, recall and F1.

    Args:
        cm: Confusion matrix with at least one sample

    Returns:
        Tuple of (accuracy, macro precision, macro recall, macro F1)

    Raises:
        ValueError: If the matrix is empty
    """
    if cm.total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    precision, recall, f1 = per_class_metrics(cm)
    return (
        cm.trace / cm.total,
        float(precision.mean()),
        float(recall.mean()),
        float(f1.mean()),
    )


def evaluate_model(model: MlpModel, dataset: LabeledDataset) -> Tuple[ConfusionMatrix, float]:
    """Confusion matrix and mean cross-entropy of a model on a labeled dataset."""
    predictions = predict(model, dataset.images)
    cm = confusion(predictions, dataset.labels, n_classes=model.layer_dims[-1])
    return cm, mean_cross_entropy(model, dataset.images, dataset.labels)


class ModelEvaluator:
    """Evaluates models on a fixed test set, caching results by model fingerprint.

    After a synchronous aggregation every node holds the same parameters, so
    the cache avoids evaluating one model N times.
    """

    def __init__(self, test_set: LabeledDataset, max_entries: int = 64):
        self.test_set = test_set
        self.max_entries = max_entries
        self._cache: Dict[str, Tuple[float, float, float, float, float]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def evaluate(self, model: MlpModel) -> Tuple[float, float, float, float, float]:
        """Return (accuracy, precision, recall, f1, loss)."""
        key = model.fingerprint()
        with self._lock:
            if key in self._cache:
                self.hits += 1
                return self._cache[key]
        cm, loss = evaluate_model(model, self.test_set)
        result = (*metrics_from_confusion(cm), loss)
        with self._lock:
            self.misses += 1
            if len(self._cache) >= self.max_entries:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = result
        return result

    def sample(self, node: int, round_index: int, model: MlpModel, **counters) -> KpiSample:
        accuracy, precision, recall, f1, loss = self.evaluate(model)
        return KpiSample(
            node=node,
            round=round_index,
            accuracy=accuracy,
            precision=precision,
            recall=recall,
            f1=f1,
            loss=loss,
            **counters,
        )


def average_over_participants(samples: Sequence[KpiSample]) -> KpiSample:
    """
    Federation-level sample of one round.

    Metric fields are arithmetic means over the nodes; byte and flop
    counters are summed federation-wide. Samples are ordered by node id
    first, so the result does not depend on input order.

    Args:
        samples: Per-node samples of a single round

    Returns:
        Sample with ``node=None``

    Raises:
        ValueError: Empty input or samples from different rounds
    """
    if not samples:
        raise ValueError("no samples to average")
    rounds = {s.round for s in samples}
    if len(rounds) != 1:
        raise ValueError(f"samples mix rounds {sorted(rounds)}")
    ordered = sorted(samples, key=lambda s: (s.node is None, s.node if s.node is not None else 0))

    def mean(name: str) -> float:
        return math.fsum(getattr(s, name) for s in ordered) / len(ordered)

    seconds = [s.process_seconds for s in ordered if s.process_seconds is not None]
    return KpiSample(
        node=None,
        round=ordered[0].round,
        accuracy=mean("accuracy"),
        precision=mean("precision"),
        recall=mean("recall"),
        f1=mean("f1"),
        loss=mean("loss"),
        bytes_sent=sum(s.bytes_sent for s in ordered),
        bytes_received=sum(s.bytes_received for s in ordered),
        flops=sum(s.flops for s in ordered),
        process_seconds=math.fsum(seconds) if seconds else None,
    )


def convergence_round(record: RunRecord, threshold: float) -> Optional[int]:
    """Smallest round whose federation accuracy reaches ``threshold``; None if never."""
    return first_round_reaching([r.federation.accuracy for r in record.rounds], threshold)


def first_round_reaching(accuracies: Sequence[float], threshold: float) -> Optional[int]:
    for index, accuracy in enumerate(accuracies):
        if accuracy >= threshold:
            return index
    return None
