"""Dataset descriptors, label normalization and split manifests."""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp"}


class RegistryError(KeyError):
    pass


class IntegrityError(ValueError):
    pass


class TestAccessError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    display_name: str
    num_images: int
    num_classes: int
    image_size: int
    modality: str
    root: Path | None = None

    def with_root(self, root) -> "DatasetDescriptor":
        return replace(self, root=Path(root))

    @property
    def train_manifest_path(self) -> Path:
        return self._require_root() / "splits" / "train.tsv"

    @property
    def test_manifest_path(self) -> Path:
        return self._require_root() / "splits" / "test.tsv"

    def _require_root(self) -> Path:
        if self.root is None:
            raise RegistryError(f"dataset {self.name!r} has no root directory")
        return self.root


DATASETS: "OrderedDict[str, DatasetDescriptor]" = OrderedDict(
    (d.name, d)
    for d in [
        DatasetDescriptor("eurosat", "EuroSAT", 27000, 10, 64, "satellite RGB (Sentinel-2 B4/B3/B2)"),
        DatasetDescriptor("uc_merced", "UC Merced", 2100, 21, 256, "aerial RGB"),
        DatasetDescriptor("resisc45", "RESISC45", 31500, 45, 256, "aerial RGB"),
        DatasetDescriptor("aid", "AID", 10000, 30, 600, "aerial RGB"),
        DatasetDescriptor("rsscn7", "RSSCN7", 2800, 7, 400, "aerial RGB"),
        DatasetDescriptor("optimal31", "Optimal-31", 1860, 31, 256, "aerial RGB"),
        DatasetDescriptor("siri_whu", "SIRI-WHU", 2400, 12, 200, "aerial RGB"),
        DatasetDescriptor("clrs", "CLRS", 15000, 25, 256, "aerial RGB"),
        DatasetDescriptor("mlrsnet", "MLRSNet", 109161, 47, 256, "aerial RGB"),
    ]
)


def get_descriptor(name: str) -> DatasetDescriptor:
    try:
        return DATASETS[name]
    except KeyError:
        raise RegistryError(f"unknown dataset {name!r}; known: {', '.join(DATASETS)}") from None


def register_dataset(descriptor: DatasetDescriptor, label_map: "LabelMap | None" = None) -> None:
    DATASETS[descriptor.name] = descriptor
    if label_map is not None:
        _LABEL_MAPS[descriptor.name] = label_map


# -- labels ----------------------------------------------------------------------


@dataclass(frozen=True)
class LabelMap:
    """Raw label -> prompt-ready name; insertion order defines class ids."""

    dataset: str
    mapping: "OrderedDict[str, str]"
    version: str = "1"

    def __post_init__(self):
        for raw, norm in self.mapping.items():
            if "_" in norm:
                raise ValueError(f"normalized name {norm!r} for {raw!r} still contains an underscore")

    @property
    def raw_labels(self) -> list[str]:
        return list(self.mapping)

    @property
    def classnames(self) -> list[str]:
        return list(self.mapping.values())

    def class_id(self, raw: str) -> int:
        try:
            return self.raw_labels.index(raw)
        except ValueError:
            raise RegistryError(f"raw label {raw!r} is not in the {self.dataset} label map") from None


_LABEL_MAPS: dict[str, LabelMap] = {}


def _load_label_maps(text: str) -> dict[str, LabelMap]:
    version = "1"
    rows: dict[str, OrderedDict] = {}
    for line in text.splitlines():
        if line.startswith("# version"):
            version = line.split()[-1]
        if not line.strip() or line.startswith("#"):
            continue
        ds, raw, norm = line.split("\t")
        rows.setdefault(ds, OrderedDict())[raw] = norm
    return {ds: LabelMap(ds, m, version) for ds, m in rows.items()}


def label_map(dataset: str) -> LabelMap:
    if not _LABEL_MAPS:
        text = (resources.files("rsprompt.assets") / "label_maps_v1.tsv").read_text()
        for k, v in _load_label_maps(text).items():
            _LABEL_MAPS.setdefault(k, v)
    try:
        return _LABEL_MAPS[dataset]
    except KeyError:
        raise RegistryError(f"no label map for dataset {dataset!r}") from None


def normalize_label(raw: str, mapping: LabelMap) -> str:
    try:
        return mapping.mapping[raw]
    except KeyError:
        raise RegistryError(f"raw label {raw!r} has no entry in the {mapping.dataset} label map") from None


# -- test-split access guard -------------------------------------------------------

_FORBIDDEN: contextvars.ContextVar[frozenset] = contextvars.ContextVar("forbidden_splits", default=frozenset())


@contextlib.contextmanager
def forbid_splits(*keys: str):
    """Within the block, reading a manifest keyed ``"<dataset>/<split>"`` or ``"*/<split>"`` raises."""
    token = _FORBIDDEN.set(_FORBIDDEN.get() | frozenset(keys))
    try:
        yield
    finally:
        _FORBIDDEN.reset(token)


def _check_access(dataset: str, split: str) -> None:
    forbidden = _FORBIDDEN.get()
    if f"{dataset}/{split}" in forbidden or f"*/{split}" in forbidden:
        raise TestAccessError(f"access to the {split} split of {dataset!r} is forbidden in this phase")


# -- manifests -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitManifest:
    dataset: str
    split: str
    items: tuple[tuple[str, str], ...]
    protocol: str = "aitlas-arena"
    version: str = "1"

    def digest(self) -> str:
        h = hashlib.sha256()
        for path, raw in self.items:
            h.update(f"{path}\t{raw}\n".encode())
        return h.hexdigest()

    def by_class(self) -> "OrderedDict[str, list[str]]":
        out: OrderedDict[str, list[str]] = OrderedDict()
        for path, raw in self.items:
            out.setdefault(raw, []).append(path)
        return out


def read_manifest(path, dataset: str, split: str) -> SplitManifest:
    _check_access(dataset, split)
    meta = {"protocol": "aitlas-arena", "version": "1"}
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key in meta:
                    meta[key] = val
                continue
            p, raw = line.split("\t")
            items.append((p, raw))
    return SplitManifest(dataset, split, tuple(items), meta["protocol"], meta["version"])


def write_manifest(manifest: SplitManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# protocol={manifest.protocol}\n# version={manifest.version}\n")
        for p, raw in manifest.items:
            fh.write(f"{p}\t{raw}\n")
    return path


@dataclass
class Dataset:
    """Descriptor plus lazily-read split manifests rooted on disk."""

    descriptor: DatasetDescriptor
    labels: LabelMap
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def root(self) -> Path:
        return self.descriptor._require_root()

    @property
    def classnames(self) -> list[str]:
        return self.labels.classnames

    def manifest(self, split: str) -> SplitManifest:
        _check_access(self.name, split)
        if split not in self._cache:
            path = self.descriptor.train_manifest_path if split == "train" else self.descriptor.test_manifest_path
            self._cache[split] = read_manifest(path, self.name, split)
        return self._cache[split]

    def train(self) -> SplitManifest:
        return self.manifest("train")

    def test(self) -> SplitManifest:
        return self.manifest("test")

    def items(self, split: str) -> list[tuple[str, int]]:
        return [(p, self.labels.class_id(raw)) for p, raw in self.manifest(split).items]

    def split_digests(self) -> dict[str, str]:
        # digest computation reads files directly and bypasses the guard on purpose
        out = {}
        for split, path in (("train", self.descriptor.train_manifest_path), ("test", self.descriptor.test_manifest_path)):
            if path.exists():
                out[split] = hashlib.sha256(path.read_bytes()).hexdigest()
        return out


def load_dataset(name: str, root, check_files: bool = True) -> Dataset:
    """Open ``root/<name>`` (or ``root`` itself if it holds ``splits/``) and validate it.

    Raises :class:`IntegrityError` when the manifests disagree with the
    descriptor's image/class counts or reference missing files.
    """
    desc = get_descriptor(name)
    root = Path(root)
    if not (root / "splits").is_dir() and (root / name / "splits").is_dir():
        root = root / name
    desc = desc.with_root(root)
    for p in (desc.train_manifest_path, desc.test_manifest_path):
        if not p.exists():
            raise FileNotFoundError(f"split manifest {p} is missing")
    ds = Dataset(desc, label_map(name))
    # counts are checked without tripping the guard: reading happens before any phase opens
    train = read_manifest(desc.train_manifest_path, name, "train-integrity")
    test = read_manifest(desc.test_manifest_path, name, "test-integrity")
    n_images = len(train.items) + len(test.items)
    if n_images != desc.num_images:
        raise IntegrityError(f"{name}: manifests list {n_images} images, descriptor says {desc.num_images}")
    raws = {raw for _, raw in train.items + test.items}
    if len(raws) != desc.num_classes:
        raise IntegrityError(f"{name}: manifests hold {len(raws)} classes, descriptor says {desc.num_classes}")
    for raw in sorted(raws):
        normalize_label(raw, ds.labels)
    if check_files:
        missing = [p for p, _ in train.items + test.items if not (root / p).exists()]
        if missing:
            raise IntegrityError(f"{name}: {len(missing)} manifest images missing on disk, e.g. {missing[0]}")
    return ds


def scan_class_folders(root) -> list[tuple[str, str]]:
    """``(relative path, folder name)`` for every image under ``root/<class>/``."""
    root = Path(root)
    out = []
    for cls_dir in sorted(p for p in root.iterdir() if p.is_dir() and p.name != "splits"):
        for img in sorted(cls_dir.rglob("*")):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                out.append((img.relative_to(root).as_posix(), cls_dir.name))
    return out


def make_split_manifests(root, name: str, test_fraction: float = 0.2, seed: int = 0) -> tuple[Path, Path]:
    """Stratified train/test manifests from a class-folder layout.

    For datasets whose official split files are unavailable; reports carry the
    resulting split digests so numbers stay traceable.
    """
    import numpy as np

    root = Path(root)
    by_class: OrderedDict[str, list[str]] = OrderedDict()
    for p, raw in scan_class_folders(root):
        by_class.setdefault(raw, []).append(p)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for raw, paths in by_class.items():
        order = rng.permutation(len(paths))
        n_test = int(round(test_fraction * len(paths)))
        test += [(paths[i], raw) for i in sorted(order[:n_test])]
        train += [(paths[i], raw) for i in sorted(order[n_test:])]
    proto = f"stratified-{test_fraction}-seed{seed}"
    a = write_manifest(SplitManifest(name, "train", tuple(train), proto), root / "splits" / "train.tsv")
    b = write_manifest(SplitManifest(name, "test", tuple(test), proto), root / "splits" / "test.tsv")
    return a, b


def fetch_instructions(name: str) -> str:
    desc = get_descriptor(name)
    return (
        f"{desc.display_name}: download the official archive ({desc.num_images} images, {desc.num_classes} classes), "
        f"unpack it as <root>/{name}/<class>/<image>, and place the AITLAS Arena split files at "
        f"<root>/{name}/splits/train.tsv and test.tsv (lines: relative_path<TAB>raw_label)."
    )
