from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .state import PromptState


def gaussian_weights(n_epochs: int, mean: float | None = None, std: float | None = None) -> np.ndarray:
    """Normalized Gaussian weights over epochs ``1..n_epochs``.

    Defaults put the mean at mid-training and ``std = n_epochs / 3.3``.
    """
    if n_epochs < 1:
        raise ValueError("need at least one epoch")
    mean = n_epochs / 2 if mean is None else mean
    std = n_epochs / 3.3 if std is None else std
    if std <= 0:
        raise ValueError("std must be positive")
    e = np.arange(1, n_epochs + 1, dtype=np.float64)
    w = np.exp(-((e - mean) ** 2) / (2 * std**2))
    return w / w.sum()


def gaussian_prompt_aggregate(snapshots: Sequence[PromptState], weights=None) -> PromptState:
    """Weighted average of every learnable tensor across per-epoch snapshots.

    ``weights`` defaults to :func:`gaussian_weights` over the snapshot count and
    is renormalized to sum to one.
    """
    if not snapshots:
        raise ValueError("no snapshots to aggregate")
    first = snapshots[0]
    for s in snapshots[1:]:
        if s.method != first.method or s.shapes() != first.shapes():
            raise ValueError("snapshots differ in method or tensor shapes")
    w = gaussian_weights(len(snapshots)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(snapshots),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per snapshot, with a positive sum")
    w = w / w.sum()
    if len(snapshots) == 1:
        return first.snapshot()
    out = {}
    for name, ref in first.tensors.items():
        acc = torch.zeros_like(ref, dtype=torch.float64)
        for wi, s in zip(w, snapshots):
            acc += float(wi) * s.tensors[name].detach().to(torch.float64)
        out[name] = acc.to(ref.dtype)
    meta = dict(first.meta, aggregated_from=len(snapshots))
    return PromptState(first.method, out, first.init_template, meta)
