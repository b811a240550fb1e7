"""Linear-probe baseline: L2-regularized multinomial logistic regression on frozen image features."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from .backbone.bundle import BackboneBundle
from .data.images import iter_batches
from .evaluation.metrics import EvalReport, make_report

logger = logging.getLogger(__name__)

COARSE_GRID = tuple(np.logspace(-4, 4, 10))
MAX_ITER = 1000


@dataclass
class FeatureTable:
    features: np.ndarray
    labels: np.ndarray
    split: str = ""
    backbone_digest: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature and label counts differ")
        if not np.isfinite(self.features).all():
            raise ValueError("feature table contains non-finite values")


@dataclass
class ProbeModel:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)
    C_reg: float
    n_iter: int = 0
    converged: bool = True
    loss: float = float("nan")
    trace: list = field(default_factory=list)

    def decision_function(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, features) -> np.ndarray:
        return self.decision_function(features).argmax(axis=1)


def extract_features(
    bundle: BackboneBundle,
    root,
    items: Sequence[tuple[str, int]],
    split: str = "",
    cache_dir=None,
    batch_size: int = 64,
    normalize: bool = True,
) -> FeatureTable:
    """Frozen image features in ``items`` order, cached per (split, backbone digest)."""
    digest = bundle.digest()
    cache = None
    if cache_dir is not None:
        blob = "\n".join(f"{p}\t{c}" for p, c in items) + digest + f"norm={normalize}"
        key = hashlib.sha256(blob.encode()).hexdigest()[:24]
        cache = Path(cache_dir) / f"{split or 'features'}-{key}.npz"
        if cache.exists():
            with np.load(cache) as z:
                return FeatureTable(z["features"], z["labels"], split, digest)
    feats, labels = [], []
    with torch.no_grad():
        for images, y in iter_batches(root, list(items), bundle.preprocess, batch_size):
            feats.append(bundle.encode_image(images, normalize=normalize).double().numpy())
            labels.append(y.numpy())
    table = FeatureTable(np.concatenate(feats), np.concatenate(labels), split, digest)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, features=table.features, labels=table.labels)
    return table


def probe_objective(params: np.ndarray, X: np.ndarray, Y: np.ndarray, C_reg: float):
    """Summed multinomial cross-entropy + ||W||^2 / (2 C); the bias is unpenalized."""
    n_cls = Y.shape[1]
    d = X.shape[1]
    W = params[: n_cls * d].reshape(n_cls, d)
    b = params[n_cls * d :]
    Z = X @ W.T + b
    logp = log_softmax(Z, axis=1)
    loss = -(Y * logp).sum() + 0.5 / C_reg * (W * W).sum()
    R = softmax(Z, axis=1) - Y
    gW = R.T @ X + W / C_reg
    gb = R.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit_probe(table: FeatureTable, C_reg: float, num_classes: int | None = None, max_iter: int = MAX_ITER) -> ProbeModel:
    if C_reg <= 0:
        raise ValueError("C_reg must be positive")
    n_cls = num_classes or int(table.labels.max()) + 1
    present = set(table.labels.tolist())
    absent = [c for c in range(n_cls) if c not in present]
    if absent:
        raise ValueError(f"classes {absent} have no training examples")
    X = table.features
    Y = np.eye(n_cls)[table.labels]
    x0 = np.zeros(n_cls * X.shape[1] + n_cls)
    res = minimize(
        probe_objective, x0, args=(X, Y, C_reg), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-14},
    )
    d = X.shape[1]
    W = res.x[: n_cls * d].reshape(n_cls, d)
    return ProbeModel(W, res.x[n_cls * d :], float(C_reg), int(res.nit), bool(res.success), float(res.fun))


def validation_accuracy(model: ProbeModel, table: FeatureTable) -> float:
    return float((model.predict(table.features) == table.labels).mean())


def refine_search(score: Callable[[float], float], grid: Sequence[float] = COARSE_GRID, steps: int = 8):
    """Coarse grid, then up to ``steps`` bisections in log space around the best value.

    Ties go to the smaller C. Returns ``(best_C, trace)`` with every evaluated
    ``(C, score)`` pair in evaluation order.
    """
    if steps > 8:
        raise ValueError("at most 8 refinement steps")
    logs = np.log10(np.asarray(grid, dtype=np.float64))
    trace = []
    seen: dict[float, float] = {}

    def evaluate(lc: float) -> float:
        if lc not in seen:
            seen[lc] = score(10.0**lc)
            trace.append((10.0**lc, seen[lc]))
        return seen[lc]

    scores = [evaluate(lc) for lc in logs]
    i = int(np.argmax(scores))  # first maximum = smallest C
    best = logs[i]
    lo = logs[max(i - 1, 0)]
    hi = logs[min(i + 1, len(logs) - 1)]
    for _ in range(steps):
        left, right = (lo + best) / 2, (best + hi) / 2
        s_best, s_left, s_right = evaluate(best), evaluate(left), evaluate(right)
        if s_left > s_best and s_left >= s_right:
            hi, best = best, left
        elif s_right > s_best:
            lo, best = best, right
        else:
            lo, hi = left, right
    return 10.0**best, trace


def search_C(train: FeatureTable, validation: FeatureTable, grid=COARSE_GRID, steps: int = 8, num_classes=None,
             max_iter: int = MAX_ITER):
    if validation.labels.size == 0:
        raise ValueError("validation table is empty")
    n_cls = num_classes or int(max(train.labels.max(), validation.labels.max())) + 1

    def score(c):
        return validation_accuracy(fit_probe(train, c, n_cls, max_iter), validation)

    best, trace = refine_search(score, grid, steps)
    logger.info("probe C search: best C=%.4g after %d fits", best, len(trace))
    return best, trace


def evaluate_probe(model: ProbeModel, table: FeatureTable, *, dataset="", shots=0, seed=0, classnames=None) -> EvalReport:
    if table.features.shape[1] != model.weight.shape[1]:
        raise ValueError(f"feature width {table.features.shape[1]} != probe width {model.weight.shape[1]}")
    n_cls = model.weight.shape[0]
    if table.labels.size and table.labels.max() >= n_cls:
        raise ValueError(f"labels exceed the probe's {n_cls} classes")
    scores = model.decision_function(table.features)
    prov = {"C_reg": model.C_reg, "backbone_digest": table.backbone_digest, "split": table.split}
    return make_report(scores, table.labels, n_cls, dataset=dataset, method="probe", shots=shots, seed=seed,
                       classnames=classnames, provenance=prov)
