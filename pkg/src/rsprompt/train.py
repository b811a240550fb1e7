"""SGD over prompt tensors with a warmup + cosine schedule, snapshots and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .backbone.bundle import ArchiveError, BackboneBundle
from .data.sampling import derived_rng
from .prompts.aggregate import gaussian_prompt_aggregate, gaussian_weights
from .prompts.methods import class_tokens, init_state, textual_diversity_targets, training_loss
from .prompts.state import MethodConfig, PromptState

logger = logging.getLogger(__name__)

DEFAULT_LR = {"coop": 0.002, "cocoop": 0.002, "maple": 0.0035, "promptsrc": 0.0025}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    warmup_lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.warmup_lr <= 0 or any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")

    def base_lr(self, method: str) -> float:
        return self.lr.get(method, DEFAULT_LR[method])

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, step: int, steps_per_epoch: int, base_lr: float, epochs: int, warmup_lr: float = 1e-5) -> float:
    """Rate for ``step`` (0-based) of ``epoch`` (1-based).

    Epoch 1 is a constant warmup; epochs 2..E follow a per-step cosine from
    ``base_lr`` towards 0.
    """
    if not 1 <= epoch <= epochs:
        raise ValueError(f"epoch {epoch} outside 1..{epochs}")
    if epoch == 1:
        return warmup_lr
    if epochs == 1:
        return base_lr
    frac = step / max(steps_per_epoch, 1)
    return base_lr * 0.5 * (1 + math.cos(math.pi * (epoch - 2 + frac) / (epochs - 1)))


@dataclass
class TrainResult:
    state: PromptState
    snapshots: list[PromptState]
    history: list[dict]
    ensembled: PromptState | None = None


def train(
    bundle: BackboneBundle,
    method: str,
    images: torch.Tensor,
    labels: torch.Tensor,
    classnames: Sequence[str],
    cfg: TrainConfig | None = None,
    method_cfg: MethodConfig | None = None,
    state: PromptState | None = None,
    log_path=None,
) -> TrainResult:
    """Optimize the prompt tensors of ``method`` on preprocessed ``images``.

    The backbone is never touched: only the tensors of the returned state
    receive gradients. For PromptSRC one snapshot per epoch is kept and a
    Gaussian-aggregated state is returned alongside the final one.
    """
    cfg = cfg or TrainConfig()
    method_cfg = method_cfg or MethodConfig()
    labels = torch.as_tensor(labels, dtype=torch.long)
    state = (state or init_state(bundle, method, method_cfg, cfg.seed)).snapshot()
    state.requires_grad_(True)
    tokens = class_tokens(bundle, classnames, state.context.shape[0], state.meta.get("class_suffix", "."))
    targets = None
    if method == "promptsrc":
        targets = textual_diversity_targets(bundle, classnames, method_cfg.templates())
    opt = torch.optim.SGD(
        state.parameters(), lr=cfg.warmup_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    images = images.to(bundle.dtype)
    n = images.shape[0]
    steps = math.ceil(n / cfg.batch_size) if n else 0
    rng = derived_rng(method, cfg.seed, n, "shuffle")
    keep_snapshots = method == "promptsrc" and method_cfg.ensemble
    snapshots: list[PromptState] = []
    history: list[dict] = []
    log = open(log_path, "a") if log_path else None
    base = cfg.base_lr(method)
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = torch.from_numpy(rng.permutation(n))
            total = 0.0
            for step in range(steps):
                idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                lr = lr_at(epoch, step, steps, base, cfg.epochs, cfg.warmup_lr)
                for group in opt.param_groups:
                    group["lr"] = lr
                loss, parts = training_loss(bundle, state, images[idx], labels[idx], tokens, method_cfg, targets)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g}, batch={idx.tolist()})"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                if log:
                    rec = {"epoch": epoch, "step": step, "lr": lr, "loss": float(loss.detach())}
                    rec.update({k: float(v) for k, v in parts.items()})
                    log.write(json.dumps(rec) + "\n")
            history.append({"epoch": epoch, "loss": total / max(n, 1)})
            if keep_snapshots:
                snapshots.append(state.snapshot())
    finally:
        if log:
            log.close()
    final = state.snapshot()
    ensembled = None
    if keep_snapshots and snapshots:
        w = gaussian_weights(len(snapshots), method_cfg.ensemble_mean, method_cfg.ensemble_std)
        ensembled = gaussian_prompt_aggregate(snapshots, w)
    return TrainResult(final, snapshots, history, ensembled)


# -- checkpoints -------------------------------------------------------------------


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CheckpointRecord:
    state: PromptState
    epoch: int
    train_loss: float
    config_hash: str
    manifest_digest: str
    backbone_digest: str
    wall_clock: float = field(default_factory=time.time)


def _tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(tensors[k].contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(record: CheckpointRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().cpu() for k, v in record.state.tensors.items()}
    meta = {
        "method": record.state.method,
        "init_template": record.state.init_template,
        "state_meta": record.state.meta,
        "shapes": record.state.shapes(),
        "epoch": record.epoch,
        "train_loss": record.train_loss,
        "config_hash": record.config_hash,
        "manifest_digest": record.manifest_digest,
        "backbone_digest": record.backbone_digest,
        "wall_clock": record.wall_clock,
        "tensor_digest": _tensor_digest(tensors),
    }
    save_file(tensors, str(path), metadata={"rsprompt": json.dumps(meta, sort_keys=True)})
    return path


def load_checkpoint(path, backbone_digest: str | None = None, expected_config_hash: str | None = None) -> CheckpointRecord:
    """Reload a checkpoint bit-exactly; refuses a different backbone digest."""
    try:
        tensors = load_file(str(path))
        from safetensors import safe_open

        with safe_open(str(path), "pt") as fh:
            meta = json.loads(fh.metadata()["rsprompt"])
    except (SafetensorError, KeyError, ValueError, OSError) as exc:
        raise ArchiveError(f"corrupt checkpoint {path}: {exc}") from exc
    if _tensor_digest(tensors) != meta["tensor_digest"]:
        raise ArchiveError(f"checkpoint {path} failed its integrity check")
    if backbone_digest is not None and meta["backbone_digest"] != backbone_digest:
        raise ArchiveError(f"checkpoint {path} was trained on a different backbone")
    if expected_config_hash is not None and meta["config_hash"] != expected_config_hash:
        warnings.warn(f"checkpoint {path} config hash {meta['config_hash']} != {expected_config_hash}", stacklevel=2)
    state = PromptState(meta["method"], tensors, meta["init_template"], meta["state_meta"])
    return CheckpointRecord(
        state, meta["epoch"], meta["train_loss"], meta["config_hash"], meta["manifest_digest"],
        meta["backbone_digest"], meta["wall_clock"],
    )
