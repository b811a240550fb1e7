"""The frozen substrate every method shares: weights, tokenizer, preprocessing."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .model import BackboneGeometry, ClipModel, ConfigurationError
from .preprocess import PreprocessSpec
from .tokenizer import CONTEXT_LENGTH, FoldedTokenizer, TokenSequence, default_bpe, tokenize, tokenize_prompt

logger = logging.getLogger(__name__)

NORM_TOL = 1e-5


class InvalidTokenError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ArchiveError(ValueError):
    pass


@dataclass
class EmbeddedPrompt:
    """Batch of embedded 77-token prompts.

    ``vectors`` is (B, 77, d_text); ``learnable_mask`` marks trainable positions.
    """

    vectors: torch.Tensor
    eos_positions: torch.Tensor
    learnable_mask: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.vectors.shape[-2] != CONTEXT_LENGTH:
            raise ValueError(f"embedded prompt needs {CONTEXT_LENGTH} rows, got {self.vectors.shape[-2]}")
        if self.learnable_mask is None:
            self.learnable_mask = torch.zeros(CONTEXT_LENGTH, dtype=torch.bool)


def _freeze(model: torch.nn.Module) -> ClipModel:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class BackboneBundle:
    """Frozen dual encoder plus its tokenizer and preprocessing."""

    def __init__(self, model: ClipModel, tokenizer, preprocess: PreprocessSpec):
        self.model = _freeze(model)
        self.tokenizer = tokenizer
        self.preprocess = preprocess

    @property
    def geometry(self) -> BackboneGeometry:
        return self.model.geometry

    @property
    def dtype(self) -> torch.dtype:
        return self.model.token_embedding.weight.dtype

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.model.logit_scale.exp()

    def to(self, dtype: torch.dtype) -> "BackboneBundle":
        """Copy of this bundle cast to ``dtype`` (the original stays untouched)."""
        return BackboneBundle(copy.deepcopy(self.model).to(dtype), self.tokenizer, self.preprocess)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- tokens ---------------------------------------------------------------

    def tokenize(self, text: str) -> TokenSequence:
        return tokenize(text, self.tokenizer)

    def tokenize_prompt(self, template: str, classname: str) -> TokenSequence:
        return tokenize_prompt(template, classname, self.tokenizer)

    def embed_tokens(self, seqs: TokenSequence | Sequence[TokenSequence]) -> EmbeddedPrompt:
        if isinstance(seqs, TokenSequence):
            seqs = [seqs]
        ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
        if ids.min() < 0 or ids.max() >= self.geometry.vocab_size:
            raise InvalidTokenError(f"token ids must lie in [0, {self.geometry.vocab_size})")
        with torch.no_grad():
            vectors = self.model.token_embedding(ids)
        eos = torch.tensor([s.eos_position for s in seqs])
        return EmbeddedPrompt(vectors=vectors, eos_positions=eos)

    # -- encoders -------------------------------------------------------------

    def encode_text(self, prompt: EmbeddedPrompt, injections=None, normalize: bool = True) -> torch.Tensor:
        feats = self.model.encode_text(prompt.vectors, prompt.eos_positions, injections)
        return l2_normalize(feats) if normalize else feats

    def encode_image(self, pixels: torch.Tensor, injections=None, normalize: bool = True) -> torch.Tensor:
        feats = self.model.encode_image(pixels.to(self.dtype), injections)
        return l2_normalize(feats) if normalize else feats

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        """Frozen normalized text features for plain strings."""
        with torch.no_grad():
            return self.encode_text(self.embed_tokens([self.tokenize(t) for t in texts]))

    def save(self, path) -> Path:
        return save_backbone(self, path)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


def similarity_logits(images: torch.Tensor, classes: torch.Tensor, scale) -> torch.Tensor:
    """``scale * <image_i, class_c>`` for unit-norm rows."""
    for name, t in (("image", images), ("class", classes)):
        norms = t.detach().norm(dim=-1)
        if t.numel() and (norms - 1).abs().max() > NORM_TOL:
            raise ContractError(f"{name} embeddings must be unit-norm (max deviation {float((norms - 1).abs().max()):.2e})")
    # elementwise product + sum keeps every logit independent of the batch size
    return scale * (images.unsqueeze(1) * classes.unsqueeze(0)).sum(dim=-1)


def micro_backbone(seed: int = 0, dtype: torch.dtype = torch.float32) -> BackboneBundle:
    """Randomly initialized 2-layer, width-32 stand-in with the full interface."""
    g = BackboneGeometry.micro()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ClipModel(g)
    finally:
        torch.random.set_rng_state(gen_state)
    pre = PreprocessSpec(target_size=g.image_size)
    return BackboneBundle(model.to(dtype), FoldedTokenizer(g.vocab_size), pre)


# -- archive I/O -----------------------------------------------------------------


def _metadata_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_backbone(bundle: BackboneBundle, path) -> Path:
    """Write weights as a flat named-tensor archive plus a JSON metadata document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous() for k, v in bundle.model.state_dict().items()}
    save_file(tensors, str(path))
    meta = {
        "format": "rsprompt-backbone/1",
        "geometry": bundle.geometry.to_dict(),
        "preprocess": bundle.preprocess.to_dict(),
        "tokenizer": "bpe" if bundle.geometry.vocab_size == 49408 else f"folded:{bundle.geometry.vocab_size}",
        "digest": bundle.digest(),
    }
    _metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_backbone(path, verify_digest: bool = True) -> BackboneBundle:
    path = Path(path)
    meta_path = _metadata_path(path)
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"backbone archive {path} or its metadata {meta_path} is missing")
    meta = json.loads(meta_path.read_text())
    g = BackboneGeometry(**meta["geometry"])
    try:
        tensors = load_file(str(path))
    except Exception as exc:
        raise ArchiveError(f"cannot read weight archive {path}: {exc}") from exc
    validate_state_dict(tensors, g)
    model = ClipModel(g)
    model.load_state_dict(tensors, strict=True)
    model = model.to(next(iter(tensors.values())).dtype)
    tok = default_bpe() if meta["tokenizer"] == "bpe" else FoldedTokenizer(int(meta["tokenizer"].split(":")[1]))
    bundle = BackboneBundle(model, tok, PreprocessSpec.from_dict(meta["preprocess"]))
    if verify_digest and "digest" in meta and bundle.digest() != meta["digest"]:
        raise ArchiveError(f"weight digest mismatch for {path}")
    return bundle


def validate_state_dict(tensors: dict, g: BackboneGeometry) -> None:
    expected = g.expected_shapes()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ArchiveError(f"tensor names do not match geometry: missing={missing[:5]} unexpected={extra[:5]}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ArchiveError(f"{name}: shape {tuple(tensors[name].shape)} != expected {shape}")


def convert_state_dict(state_dict: dict, path, activation: str = "quick_gelu", preprocess: PreprocessSpec | None = None) -> Path:
    """Turn an OpenAI/OpenCLIP ViT-B/16 state dict into an archive this package loads."""
    drop = {"input_resolution", "context_length", "vocab_size", "attn_mask"}
    tensors = {k: v.float() for k, v in state_dict.items() if k not in drop}
    g = BackboneGeometry.vit_b16(activation)
    validate_state_dict(tensors, g)
    model = ClipModel(g)
    model.load_state_dict(tensors, strict=True)
    bundle = BackboneBundle(model, default_bpe(), preprocess or PreprocessSpec())
    return save_backbone(bundle, path)


def check_geometry(bundle: BackboneBundle, depth: int) -> None:
    if depth > min(bundle.geometry.text_layers, bundle.geometry.vision_layers):
        raise ConfigurationError(
            f"prompt depth {depth} exceeds encoder depth "
            f"{min(bundle.geometry.text_layers, bundle.geometry.vision_layers)}"
        )
