"""Dual-encoder transformer with per-layer prompt injection.

Parameter names follow the OpenAI/OpenCLIP state-dict layout so a converted
pretrained checkpoint loads without renaming.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneGeometry:
    context_length: int = 77
    vocab_size: int = 49408
    text_width: int = 512
    text_layers: int = 12
    text_heads: int = 8
    image_size: int = 224
    patch_size: int = 16
    vision_width: int = 768
    vision_layers: int = 12
    vision_heads: int = 12
    embed_dim: int = 512
    activation: str = "quick_gelu"

    @classmethod
    def vit_b16(cls, activation: str = "quick_gelu") -> "BackboneGeometry":
        return cls(activation=activation)

    @classmethod
    def micro(cls) -> "BackboneGeometry":
        return cls(
            vocab_size=64,
            text_width=32,
            text_layers=2,
            text_heads=4,
            image_size=32,
            patch_size=8,
            vision_width=32,
            vision_layers=2,
            vision_heads=4,
            embed_dim=32,
            activation="quick_gelu",
        )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        """Tensor name -> shape for every parameter of this geometry."""
        shapes: dict[str, tuple[int, ...]] = {
            "positional_embedding": (self.context_length, self.text_width),
            "text_projection": (self.text_width, self.embed_dim),
            "logit_scale": (),
            "token_embedding.weight": (self.vocab_size, self.text_width),
            "ln_final.weight": (self.text_width,),
            "ln_final.bias": (self.text_width,),
            "visual.class_embedding": (self.vision_width,),
            "visual.positional_embedding": (self.grid**2 + 1, self.vision_width),
            "visual.proj": (self.vision_width, self.embed_dim),
            "visual.conv1.weight": (self.vision_width, 3, self.patch_size, self.patch_size),
        }
        for ln in ("ln_pre", "ln_post"):
            shapes[f"visual.{ln}.weight"] = (self.vision_width,)
            shapes[f"visual.{ln}.bias"] = (self.vision_width,)
        for prefix, width, layers in (
            ("transformer", self.text_width, self.text_layers),
            ("visual.transformer", self.vision_width, self.vision_layers),
        ):
            for i in range(layers):
                p = f"{prefix}.resblocks.{i}."
                shapes[p + "ln_1.weight"] = (width,)
                shapes[p + "ln_1.bias"] = (width,)
                shapes[p + "attn.in_proj_weight"] = (3 * width, width)
                shapes[p + "attn.in_proj_bias"] = (3 * width,)
                shapes[p + "attn.out_proj.weight"] = (width, width)
                shapes[p + "attn.out_proj.bias"] = (width,)
                shapes[p + "ln_2.weight"] = (width,)
                shapes[p + "ln_2.bias"] = (width,)
                shapes[p + "mlp.c_fc.weight"] = (4 * width, width)
                shapes[p + "mlp.c_fc.bias"] = (4 * width,)
                shapes[p + "mlp.c_proj.weight"] = (width, 4 * width)
                shapes[p + "mlp.c_proj.bias"] = (width,)
        return shapes


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class LayerNorm(nn.LayerNorm):
    """LayerNorm computed in the input dtype."""


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)
        nn.init.xavier_uniform_(self.in_proj_weight)

    def forward(self, x, mask=None):
        b, n, d = x.shape
        q, k, v = F.linear(x, self.in_proj_weight, self.in_proj_bias).chunk(3, dim=-1)
        q, k, v = (t.reshape(b, n, self.heads, d // self.heads).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / (d // self.heads) ** 0.5
        if mask is not None:
            scores = scores + mask
        out = scores.softmax(dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(b, n, d))


class ResidualBlock(nn.Module):
    def __init__(self, width: int, heads: int, activation: str):
        super().__init__()
        self.ln_1 = LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = LayerNorm(width)
        act = QuickGELU() if activation == "quick_gelu" else nn.GELU()
        self.mlp = nn.Sequential(
            OrderedDict([("c_fc", nn.Linear(width, 4 * width)), ("gelu", act), ("c_proj", nn.Linear(4 * width, width))])
        )

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, activation: str):
        super().__init__()
        self.resblocks = nn.ModuleList(ResidualBlock(width, heads, activation) for _ in range(layers))


def _check_injections(injections, depth: int, width: int, name: str) -> int:
    if not injections:
        return 0
    if len(injections) > depth:
        raise ConfigurationError(f"{name} prompt depth {len(injections)} exceeds encoder depth {depth}")
    n = injections[0].shape[-2]
    for i, p in enumerate(injections):
        if p.shape[-2] != n or p.shape[-1] != width:
            raise ConfigurationError(
                f"{name} prompt at layer {i + 1} has shape {tuple(p.shape)}, expected (..., {n}, {width})"
            )
    return n


def _batched(p: torch.Tensor, b: int) -> torch.Tensor:
    return p.expand(b, *p.shape[-2:]) if p.dim() == 2 else p


class VisionTransformer(nn.Module):
    def __init__(self, g: BackboneGeometry):
        super().__init__()
        w = g.vision_width
        scale = w**-0.5
        self.conv1 = nn.Conv2d(3, w, kernel_size=g.patch_size, stride=g.patch_size, bias=False)
        self.class_embedding = nn.Parameter(scale * torch.randn(w))
        self.positional_embedding = nn.Parameter(scale * torch.randn(g.grid**2 + 1, w))
        self.ln_pre = LayerNorm(w)
        self.transformer = Transformer(w, g.vision_layers, g.vision_heads, g.activation)
        self.ln_post = LayerNorm(w)
        self.proj = nn.Parameter(scale * torch.randn(w, g.embed_dim))
        self.image_size = g.image_size

    def forward(self, pixels: torch.Tensor, prompts: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
        if pixels.dim() != 4 or pixels.shape[1] != 3 or pixels.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected pixels of shape (B, 3, {self.image_size}, {self.image_size}), got {tuple(pixels.shape)}")
        layers = self.transformer.resblocks
        n = _check_injections(prompts, len(layers), self.class_embedding.shape[0], "vision")
        b = pixels.shape[0]
        x = self.conv1(pixels).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding.to(x.dtype)
        if n:
            x = torch.cat([x, _batched(prompts[0], b)], dim=1)
        x = self.ln_pre(x)
        for i, block in enumerate(layers):
            if n and 0 < i < len(prompts):
                x = torch.cat([x[:, :-n], _batched(prompts[i], b)], dim=1)
            x = block(x)
        return self.ln_post(x[:, 0]) @ self.proj


class ClipModel(nn.Module):
    """Image and text towers projecting into one joint space."""

    def __init__(self, g: BackboneGeometry):
        super().__init__()
        self.geometry = g
        self.token_embedding = nn.Embedding(g.vocab_size, g.text_width)
        self.positional_embedding = nn.Parameter(0.01 * torch.randn(g.context_length, g.text_width))
        self.transformer = Transformer(g.text_width, g.text_layers, g.text_heads, g.activation)
        self.ln_final = LayerNorm(g.text_width)
        self.text_projection = nn.Parameter(g.text_width**-0.5 * torch.randn(g.text_width, g.embed_dim))
        self.visual = VisionTransformer(g)
        self.logit_scale = nn.Parameter(torch.tensor(float(torch.log(torch.tensor(1 / 0.07)))))
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        mask = torch.full((g.context_length, g.context_length), float("-inf")).triu_(1)
        self.register_buffer("attn_mask", mask, persistent=False)

    def encode_text(
        self,
        embeddings: torch.Tensor,
        eos_positions: torch.Tensor,
        injections: Sequence[torch.Tensor] | None = None,
        prompt_start: int = 1,
    ) -> torch.Tensor:
        """Project the end-of-sequence hidden state of ``embeddings`` (B, 77, d).

        ``injections[j]`` overwrites the prompt positions
        ``[prompt_start, prompt_start + n)`` right before block ``j + 1``.
        """
        layers = self.transformer.resblocks
        n = _check_injections(injections, len(layers) - 1, self.ln_final.normalized_shape[0], "text")
        b = embeddings.shape[0]
        x = embeddings + self.positional_embedding.to(embeddings.dtype)
        mask = self.attn_mask.to(x.dtype)
        for i, block in enumerate(layers):
            if n and 1 <= i <= len(injections):
                x = torch.cat([x[:, :prompt_start], _batched(injections[i - 1], b), x[:, prompt_start + n :]], dim=1)
            x = block(x, mask)
        x = self.ln_final(x)
        return x[torch.arange(b), eos_positions] @ self.text_projection

    def encode_image(self, pixels: torch.Tensor, injections: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
        return self.visual(pixels, injections)
