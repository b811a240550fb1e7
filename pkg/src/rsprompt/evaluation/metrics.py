"""Top-1 accuracy, confusion matrices and per-run reports."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


def predictions_from(scores_or_labels) -> np.ndarray:
    """Argmax over a (N, C) score array, first index winning ties; 1-D input passes through."""
    a = np.asarray(scores_or_labels)
    if a.ndim == 2:
        pred = a.argmax(axis=1)
        n_ties = int((a == a.max(axis=1, keepdims=True)).sum(axis=1).__gt__(1).sum())
        if n_ties:
            logger.info("%d argmax ties broken toward the lowest class index", n_ties)
        return pred
    return a.astype(np.int64)


def top1(predictions, labels) -> float:
    pred = predictions_from(predictions)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape[0] != labels.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((pred == labels).mean())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = true class, cols = predicted
    classnames: list[str] | None = None

    @property
    def normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape, dtype=np.float64), where=totals > 0)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        """Diagonal of the normalized matrix; NaN for classes with no samples."""
        totals = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        return np.where(totals > 0, diag / np.maximum(totals, 1), np.nan)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("confusion matrices differ in class count")
        return ConfusionMatrix(self.counts + other.counts, self.classnames or other.classnames)


def confusion(predictions, labels, num_classes: int, classnames: Sequence[str] | None = None) -> ConfusionMatrix:
    pred = predictions_from(predictions)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, pred), 1)
    return ConfusionMatrix(counts, list(classnames) if classnames is not None else None)


@dataclass
class EvalReport:
    dataset: str
    method: str
    shots: int
    seeds: list[int]
    accuracies: list[float]
    confusion: ConfusionMatrix
    provenance: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def per_class_accuracy(self) -> np.ndarray:
        return self.confusion.per_class_accuracy

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.dataset, self.method, self.shots)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "shots": self.shots,
            "seeds": list(self.seeds),
            "accuracies": [float(a) for a in self.accuracies],
            "accuracy": self.accuracy,
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "confusion_counts": self.confusion.counts.tolist(),
            "classnames": self.confusion.classnames,
            "provenance": dict(sorted(self.provenance.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cm = ConfusionMatrix(np.asarray(d["confusion_counts"], dtype=np.int64), d.get("classnames"))
        return cls(d["dataset"], d["method"], d["shots"], d["seeds"], d["accuracies"], cm, d.get("provenance", {}))


def make_report(predictions, labels, num_classes, *, dataset, method, shots, seed, classnames=None, provenance=None):
    cm = confusion(predictions, labels, num_classes, classnames)
    return EvalReport(dataset, method, shots, [seed], [top1(predictions, labels)], cm, dict(provenance or {}, seed=seed))


def aggregate_runs(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean accuracy over seeds; confusion counts pooled then renormalized on access."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = {r.key for r in reports}
    if len(keys) != 1:
        raise ValueError(f"cannot aggregate reports with different keys: {sorted(keys)}")
    seeds = [s for r in reports for s in r.seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in aggregation: {seeds}")
    cm = reports[0].confusion
    for r in reports[1:]:
        cm = cm + r.confusion
    prov = {"runs": [dict(r.provenance) for r in reports]}
    first = reports[0]
    return EvalReport(first.dataset, first.method, first.shots, seeds, [a for r in reports for a in r.accuracies], cm, prov)


def report_asdict(obj) -> dict:
    return asdict(obj)
