from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .registry import IntegrityError, LabelMap, SplitManifest

ALLOWED_SHOTS = (1, 2, 4, 8, 16)


class InsufficientImagesError(ValueError):
    pass


@dataclass(frozen=True)
class FewShotManifest:
    dataset: str
    k: int
    seed: int
    items: tuple[tuple[str, int], ...]

    def __post_init__(self):
        counts = Counter(c for _, c in self.items)
        if any(v != self.k for v in counts.values()):
            raise IntegrityError(f"few-shot manifest is not {self.k}-shot balanced: {dict(counts)}")
        if len({p for p, _ in self.items}) != len(self.items):
            raise IntegrityError("few-shot manifest contains duplicate images")

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.items]

    @property
    def labels(self) -> list[int]:
        return [c for _, c in self.items]

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def to_text(self) -> str:
        head = f"# dataset={self.dataset}\n# k={self.k}\n# seed={self.seed}\n"
        return head + "".join(f"{p}\t{c}\n" for p, c in self.items)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "FewShotManifest":
        meta, items = {}, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line:
                p, c = line.split("\t")
                items.append((p, int(c)))
        return cls(meta["dataset"], int(meta["k"]), int(meta["seed"]), tuple(items))


def derived_rng(*parts) -> np.random.Generator:
    """Independent RNG stream keyed by arbitrary parts (dataset, k, seed, purpose...)."""
    key = "|".join(str(p) for p in parts).encode()
    entropy = int.from_bytes(hashlib.sha256(key).digest()[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sample_few_shot(train: SplitManifest, labels: LabelMap, k: int, seed: int, exclude=()) -> FewShotManifest:
    """Draw exactly ``k`` training images per class, uniformly without replacement."""
    if train.split != "train":
        raise ValueError(f"few-shot sampling reads the train split only, got {train.split!r}")
    if k not in ALLOWED_SHOTS:
        raise ValueError(f"k must be one of {ALLOWED_SHOTS}, got {k}")
    rng = derived_rng(train.dataset, k, seed, "few-shot")
    return _draw(train, labels, k, rng, train.dataset, seed, set(exclude))


def _draw(train, labels, k, rng, dataset, seed, exclude) -> FewShotManifest:
    by_class = train.by_class()
    items = []
    for raw in labels.raw_labels:
        pool = [p for p in by_class.get(raw, []) if p not in exclude]
        if len(pool) < k:
            raise InsufficientImagesError(f"class {raw!r} has {len(pool)} training images, need {k}")
        cid = labels.class_id(raw)
        pick = rng.choice(len(pool), size=k, replace=False)
        items += [(pool[i], cid) for i in sorted(pick)]
    return FewShotManifest(dataset, k, seed, tuple(items))


def sample_validation(train: SplitManifest, labels: LabelMap, shots: FewShotManifest) -> FewShotManifest:
    """Class-balanced probe validation set disjoint from ``shots``: ``min(k, 4)`` per class."""
    per_class = min(shots.k, 4)
    rng = derived_rng(train.dataset, shots.k, shots.seed, "probe-validation")
    return _draw(train, labels, per_class, rng, train.dataset, shots.seed, set(shots.paths))
