from __future__ import annotations

from pathlib import Path
from typing import Iterator, Sequence

import torch

from ..backbone.preprocess import PreprocessSpec


class ImageReadError(OSError):
    def __init__(self, image_id: str, cause: Exception):
        super().__init__(f"cannot read image {image_id!r}: {cause}")
        self.image_id = image_id


def load_images(root, paths: Sequence[str], preprocess: PreprocessSpec) -> torch.Tensor:
    """Preprocessed (N, 3, S, S) tensor in manifest order."""
    root = Path(root)
    out = []
    for p in paths:
        try:
            out.append(preprocess.load(root / p))
        except Exception as exc:
            raise ImageReadError(p, exc) from exc
    if not out:
        s = preprocess.target_size
        return torch.empty(0, 3, s, s)
    return torch.stack(out)


def iter_batches(root, items: Sequence[tuple[str, int]], preprocess: PreprocessSpec, batch_size: int = 64) -> Iterator:
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        yield load_images(root, [p for p, _ in chunk], preprocess), torch.tensor([c for _, c in chunk])
