from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..backbone.bundle import BackboneBundle
from ..data.images import iter_batches
from ..data.registry import Dataset, forbid_splits
from ..prompts.methods import PROMPT_METHODS, classifier
from ..prompts.state import PromptState
from .metrics import EvalReport, make_report

METHOD_ORDER = ("coop", "cocoop", "maple", "promptsrc")


class UnsupportedMethodError(ValueError):
    pass


def predict(bundle: BackboneBundle, state: PromptState, classnames: Sequence[str], batches) -> tuple[np.ndarray, np.ndarray]:
    """Logits and labels over an iterable of ``(images, labels)`` batches."""
    run = classifier(bundle, state, classnames)
    scores, labels = [], []
    with torch.no_grad():
        for images, y in batches:
            scores.append(run(images.to(bundle.dtype)).double().numpy())
            labels.append(np.asarray(y))
    return np.concatenate(scores), np.concatenate(labels)


def evaluate_state(bundle, state, dataset: Dataset, *, shots: int, seed: int, batch_size: int = 64, provenance=None) -> EvalReport:
    """Top-1 report for ``state`` on the full test split of ``dataset``."""
    with forbid_splits(f"{dataset.name}/train"):
        items = dataset.items("test")
        scores, labels = predict(bundle, state, dataset.classnames, iter_batches(dataset.root, items, bundle.preprocess, batch_size))
    return make_report(
        scores, labels, len(dataset.classnames), dataset=dataset.name, method=state.method, shots=shots, seed=seed,
        classnames=dataset.classnames, provenance=provenance,
    )


def cross_eval(bundle, state: PromptState, target: Dataset, **kw) -> float:
    """Accuracy of a source-trained state on the target test split, class names swapped in."""
    if state.method not in PROMPT_METHODS:
        raise UnsupportedMethodError(f"{state.method!r} has no class-name seam to transfer through")
    return evaluate_state(bundle, state, target, shots=kw.pop("shots", 16), seed=kw.pop("seed", 0), **kw).accuracy


@dataclass
class TransferMatrix:
    """Source x target accuracies for one method; NaN marks a missing cell."""

    method: str
    sources: list[str]
    targets: list[str]
    values: np.ndarray

    @classmethod
    def empty(cls, method, sources, targets) -> "TransferMatrix":
        return cls(method, list(sources), list(targets), np.full((len(sources), len(targets)), np.nan))

    def set(self, source: str, target: str, value: float) -> None:
        self.values[self.sources.index(source), self.targets.index(target)] = value

    def get(self, source: str, target: str) -> float:
        return float(self.values[self.sources.index(source), self.targets.index(target)])

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sources": self.sources,
            "targets": self.targets,
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
        }


@dataclass
class WinnerMatrix:
    sources: list[str]
    targets: list[str]
    winners: np.ndarray  # object array of method names, None where missing
    values: np.ndarray  # max accuracy, NaN where missing
    ties: np.ndarray  # bool

    def to_dict(self) -> dict:
        return {
            "sources": self.sources,
            "targets": self.targets,
            "winners": self.winners.tolist(),
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
            "ties": self.ties.tolist(),
        }


def winner(matrices: Sequence[TransferMatrix]) -> WinnerMatrix:
    """Per-cell argmax over methods; ties go to the earlier method in ``METHOD_ORDER``.

    A cell missing for any method is missing in the result.
    """
    if not matrices:
        raise ValueError("no transfer matrices")
    ms = sorted(matrices, key=lambda m: METHOD_ORDER.index(m.method) if m.method in METHOD_ORDER else len(METHOD_ORDER))
    src, tgt = ms[0].sources, ms[0].targets
    for m in ms[1:]:
        if m.sources != src or m.targets != tgt:
            raise ValueError("transfer matrices are not aligned")
    stack = np.stack([m.values for m in ms])
    missing = np.isnan(stack).any(axis=0)
    filled = np.where(np.isnan(stack), -np.inf, stack)
    best = filled.argmax(axis=0)
    top = filled.max(axis=0)
    ties = ((filled == top).sum(axis=0) > 1) & ~missing
    winners = np.empty(best.shape, dtype=object)
    for idx in np.ndindex(best.shape):
        winners[idx] = None if missing[idx] else ms[best[idx]].method
    return WinnerMatrix(list(src), list(tgt), winners, np.where(missing, np.nan, top), ties)
