from .images import ImageReadError, iter_batches, load_images
from .registry import (
    DATASETS,
    Dataset,
    DatasetDescriptor,
    IntegrityError,
    LabelMap,
    RegistryError,
    SplitManifest,
    TestAccessError,
    fetch_instructions,
    forbid_splits,
    get_descriptor,
    label_map,
    load_dataset,
    make_split_manifests,
    normalize_label,
    read_manifest,
    register_dataset,
    scan_class_folders,
    write_manifest,
)
from .sampling import ALLOWED_SHOTS, FewShotManifest, InsufficientImagesError, derived_rng, sample_few_shot, sample_validation
