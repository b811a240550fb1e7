from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from importlib import resources

import torch

METHODS = ("zeroshot", "coop", "cocoop", "maple", "promptsrc")

# Tensor-name patterns each method may populate.
_ALLOWED = {
    "zeroshot": (),
    "coop": (r"context",),
    "cocoop": (r"context", r"meta_net\.(linear1|linear2)\.(weight|bias)"),
    "maple": (r"context", r"deep_text\.\d+", r"coupling\.\d+\.(weight|bias)"),
    "promptsrc": (r"context", r"deep_text\.\d+", r"deep_vision\.\d+"),
}


@dataclass
class MethodConfig:
    """Per-method structural and regularization settings."""

    n_ctx: int = 4
    maple_n_ctx: int = 2
    prompt_depth: int = 9
    init_template: str | None = "a photo of a"
    maple_init_tokens: str = "last"
    class_token_position: str = "end"
    class_suffix: str = "."
    init_std: float = 0.02
    lambda_image: float = 10.0
    lambda_text: float = 25.0
    kl_weight: float = 1.0
    n_templates: int = 60
    templates_path: str | None = None
    ensemble: bool = True
    ensemble_mean: float | None = None
    ensemble_std: float | None = None
    meta_net_reduction: int = 16

    def __post_init__(self):
        if self.lambda_image < 0 or self.lambda_text < 0 or self.kl_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_templates < 1:
            raise ValueError("n_templates must be >= 1")
        if self.class_token_position != "end":
            raise ValueError("only the end-position class token design is supported")
        if self.maple_init_tokens not in ("first", "last"):
            raise ValueError("maple_init_tokens must be 'first' or 'last'")

    def context_length(self, method: str) -> int:
        return self.maple_n_ctx if method == "maple" else self.n_ctx

    def templates(self) -> list[str]:
        return load_templates(self.templates_path)[: self.n_templates]

    def to_dict(self) -> dict:
        return asdict(self)


def load_templates(path=None) -> list[str]:
    """One template per line with a '{}' placeholder; '#' lines are comments."""
    if path is None:
        text = (resources.files("rsprompt.assets") / "diversity_templates_v1.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    out = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    for t in out:
        if "{}" not in t:
            raise ValueError(f"template {t!r} lacks a '{{}}' placeholder")
    return out


@dataclass
class PromptState:
    """Every learnable tensor of one method, keyed by flat name.

    Names: ``context``, ``deep_text.<layer>``, ``deep_vision.<layer>``,
    ``coupling.<layer>.weight|bias``, ``meta_net.linear{1,2}.weight|bias``.
    Layer indices are 0-based encoder layers.
    """

    method: str
    tensors: dict[str, torch.Tensor]
    init_template: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        pats = [re.compile(p) for p in _ALLOWED[self.method]]
        for name in self.tensors:
            if not any(p.fullmatch(name) for p in pats):
                raise ValueError(f"tensor {name!r} is not valid for method {self.method!r}")

    @property
    def context(self) -> torch.Tensor | None:
        return self.tensors.get("context")

    def _indexed(self, prefix: str) -> list[torch.Tensor]:
        idx = sorted(int(k.split(".")[1]) for k in self.tensors if k.startswith(prefix + ".") and k.count(".") == 1)
        return [self.tensors[f"{prefix}.{i}"] for i in idx]

    @property
    def deep_text_prompts(self) -> list[torch.Tensor]:
        return self._indexed("deep_text")

    @property
    def deep_vision_prompts(self) -> list[torch.Tensor]:
        return self._indexed("deep_vision")

    @property
    def coupling(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        n = len({k.split(".")[1] for k in self.tensors if k.startswith("coupling.")})
        return [(self.tensors[f"coupling.{i}.weight"], self.tensors[f"coupling.{i}.bias"]) for i in range(n)]

    def parameters(self) -> list[torch.Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def requires_grad_(self, flag: bool = True) -> "PromptState":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def snapshot(self) -> "PromptState":
        """Detached deep copy, safe to keep while training continues."""
        return PromptState(
            self.method,
            {k: v.detach().clone() for k, v in self.tensors.items()},
            self.init_template,
            dict(self.meta),
        )

    def to(self, dtype: torch.dtype) -> "PromptState":
        return PromptState(
            self.method, {k: v.detach().to(dtype) for k, v in self.tensors.items()}, self.init_template, dict(self.meta)
        )

    def shapes(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in sorted(self.tensors.items())}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())
