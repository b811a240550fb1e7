from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from PIL import Image

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

_RESAMPLE = {"bicubic": Image.Resampling.BICUBIC, "bilinear": Image.Resampling.BILINEAR}


@dataclass(frozen=True)
class PreprocessSpec:
    """Resize shorter side, center crop, scale to [0, 1], normalize per channel."""

    target_size: int = 224
    interpolation: str = "bicubic"
    crop: str = "center"
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD

    def __post_init__(self):
        if self.interpolation not in _RESAMPLE:
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")
        if self.crop != "center":
            raise ValueError(f"unsupported crop rule {self.crop!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessSpec":
        d = dict(d)
        d["mean"] = tuple(d.get("mean", CLIP_MEAN))
        d["std"] = tuple(d.get("std", CLIP_STD))
        return cls(**d)

    def __call__(self, image: Image.Image) -> torch.Tensor:
        image = image.convert("RGB")
        w, h = image.size
        s = self.target_size
        if w <= h:
            size = (s, max(s, round(h * s / w)))
        else:
            size = (max(s, round(w * s / h)), s)
        if size != (w, h):
            image = image.resize(size, _RESAMPLE[self.interpolation])
        w, h = image.size
        left, top = round((w - s) / 2), round((h - s) / 2)
        image = image.crop((left, top, left + s, top + s))
        arr = np.asarray(image, dtype=np.float32) / 255.0
        arr = (arr - np.asarray(self.mean, dtype=np.float32)) / np.asarray(self.std, dtype=np.float32)
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))

    def load(self, path) -> torch.Tensor:
        with Image.open(path) as im:
            return self(im)
