"""Forward and loss computations for zero-shot, CoOp, CoCoOp, MaPLe and PromptSRC.

All functions are pure given ``(bundle, state, batch)``: the frozen backbone is
only read, and gradients reach nothing but the tensors in ``state``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..backbone.bundle import BackboneBundle, EmbeddedPrompt, check_geometry, l2_normalize, similarity_logits
from ..backbone.model import ConfigurationError
from ..backbone.tokenizer import pack
from .state import MethodConfig, PromptState

PROMPT_METHODS = ("coop", "cocoop", "maple", "promptsrc")


@dataclass
class ClassTokens:
    """Per-class ``[SOS][ctx x n_ctx][class tokens][suffix][EOS]`` sequences, embedded."""

    classnames: list[str]
    embeddings: torch.Tensor  # (C, 77, d_text), frozen
    eos_positions: torch.Tensor
    n_ctx: int

    def __len__(self):
        return len(self.classnames)


@dataclass
class ClassifierBank:
    embeddings: torch.Tensor  # (C, d_joint), unit rows
    classnames: list[str]
    method: str
    template: str | None = None


def class_tokens(bundle: BackboneBundle, classnames: Sequence[str], n_ctx: int, suffix: str = ".") -> ClassTokens:
    if not classnames:
        raise ValueError("class vocabulary is empty")
    tok = bundle.tokenizer
    placeholder = tok.encode("x")[:1]
    seqs = []
    for name in classnames:
        seq = pack(tok, placeholder * n_ctx, tok.encode(name), tok.encode(suffix))
        if seq.class_span[0] != 1 + n_ctx:
            raise ConfigurationError(f"class name {name!r} leaves no room for {n_ctx} context tokens")
        seqs.append(seq)
    emb = bundle.embed_tokens(seqs)
    return ClassTokens(list(classnames), emb.vectors, emb.eos_positions, n_ctx)


def _vocab(bundle, state: PromptState, vocab) -> ClassTokens:
    n_ctx = state.context.shape[0]
    if isinstance(vocab, ClassTokens):
        if vocab.n_ctx != n_ctx:
            raise ValueError(f"class tokens built for {vocab.n_ctx} context slots, state has {n_ctx}")
        return vocab
    return class_tokens(bundle, list(vocab), n_ctx, state.meta.get("class_suffix", "."))


def assemble(tokens: ClassTokens, ctx: torch.Tensor) -> EmbeddedPrompt:
    """Write ``ctx`` (M, d) into the context slots of every class prompt."""
    c = tokens.embeddings.shape[0]
    m = tokens.n_ctx
    emb = tokens.embeddings.to(ctx.dtype)
    vectors = torch.cat([emb[:, :1], ctx.unsqueeze(0).expand(c, -1, -1), emb[:, 1 + m :]], dim=1)
    mask = torch.zeros(vectors.shape[1], dtype=torch.bool)
    mask[1 : 1 + m] = True
    return EmbeddedPrompt(vectors, tokens.eos_positions, mask)


# -- zero-shot -------------------------------------------------------------------


def fill_template(template: str, name: str) -> str:
    return template.replace("{class}", "{}").format(name)


def build_zeroshot_classifier(bundle: BackboneBundle, classnames: Sequence[str], template: str) -> ClassifierBank:
    if not classnames:
        raise ValueError("class vocabulary is empty")
    tpl = template.replace("{class}", "{}")
    with torch.no_grad():
        seqs = [bundle.tokenize_prompt(tpl, n) for n in classnames]
        feats = bundle.encode_text(bundle.embed_tokens(seqs))
    return ClassifierBank(feats, list(classnames), "zeroshot", template)


def zeroshot_logits(bundle: BackboneBundle, bank: ClassifierBank, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return similarity_logits(bundle.encode_image(images), bank.embeddings, bundle.logit_scale)


# -- initialization --------------------------------------------------------------


def _template_context(bundle: BackboneBundle, template: str, m: int, pick: str = "all") -> torch.Tensor:
    ids = bundle.tokenizer.encode(template)
    if pick == "all" and len(ids) != m:
        raise ConfigurationError(f"init template {template!r} has {len(ids)} tokens, context length is {m}")
    if len(ids) < m:
        raise ConfigurationError(f"init template {template!r} is shorter than {m} tokens")
    if pick == "first":
        ids = ids[:m]
    elif pick == "last":
        ids = ids[len(ids) - m :]
    return bundle.model.token_embedding.weight[torch.tensor(ids)].detach().clone()


def _linear(n_in: int, n_out: int) -> dict[str, torch.Tensor]:
    layer = nn.Linear(n_in, n_out)
    return {"weight": layer.weight.detach().clone(), "bias": layer.bias.detach().clone()}


def init_state(bundle: BackboneBundle, method: str, cfg: MethodConfig | None = None, seed: int = 1) -> PromptState:
    """Fresh learnable tensors for ``method`` (seeded, independent of the class vocabulary)."""
    cfg = cfg or MethodConfig()
    if method not in PROMPT_METHODS:
        raise ValueError(f"{method!r} has no learnable prompts")
    g = bundle.geometry
    m = cfg.context_length(method)
    depth = cfg.prompt_depth if method in ("maple", "promptsrc") else 1
    check_geometry(bundle, depth)
    dt = bundle.dtype
    tensors: dict[str, torch.Tensor] = {}
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if cfg.init_template:
            pick = cfg.maple_init_tokens if method == "maple" else "all"
            tensors["context"] = _template_context(bundle, cfg.init_template, m, pick)
        else:
            tensors["context"] = torch.randn(m, g.text_width) * cfg.init_std
        if method == "cocoop":
            hidden = max(1, g.embed_dim // cfg.meta_net_reduction)
            for k, v in _linear(g.embed_dim, hidden).items():
                tensors[f"meta_net.linear1.{k}"] = v
            for k, v in _linear(hidden, g.text_width).items():
                tensors[f"meta_net.linear2.{k}"] = v
        if method in ("maple", "promptsrc"):
            for layer in range(1, depth):
                tensors[f"deep_text.{layer}"] = torch.randn(m, g.text_width) * cfg.init_std
        if method == "maple":
            for layer in range(depth):
                for k, v in _linear(g.text_width, g.vision_width).items():
                    tensors[f"coupling.{layer}.{k}"] = v
        if method == "promptsrc":
            for layer in range(depth):
                tensors[f"deep_vision.{layer}"] = torch.randn(m, g.vision_width) * cfg.init_std
    tensors = {k: v.to(dt) for k, v in tensors.items()}
    meta = {"n_ctx": m, "depth": depth, "seed": seed, "class_suffix": cfg.class_suffix}
    return PromptState(method, tensors, cfg.init_template, meta)


def coop_init(bundle: BackboneBundle, template: str = "a photo of a", n_ctx: int = 4, seed: int = 1) -> PromptState:
    return init_state(bundle, "coop", MethodConfig(n_ctx=n_ctx, init_template=template), seed)


# -- per-method features ---------------------------------------------------------


def text_prompts(state: PromptState) -> list[torch.Tensor]:
    """Per-layer text prompt tokens, layer 0 first."""
    return [state.context, *state.deep_text_prompts]


def vision_prompts(state: PromptState) -> list[torch.Tensor] | None:
    if state.method == "maple":
        return [F.linear(p, w, b) for p, (w, b) in zip(text_prompts(state), state.coupling)]
    if state.method == "promptsrc":
        return state.deep_vision_prompts
    return None


def text_features(bundle: BackboneBundle, state: PromptState, tokens: ClassTokens, ctx: torch.Tensor | None = None):
    ctx = state.context if ctx is None else ctx
    injections = state.deep_text_prompts if state.method in ("maple", "promptsrc") else None
    return bundle.encode_text(assemble(tokens, ctx), injections)


def image_features(bundle: BackboneBundle, state: PromptState, images: torch.Tensor) -> torch.Tensor:
    prompts = vision_prompts(state)
    if prompts is None:
        with torch.no_grad():
            return bundle.encode_image(images)
    return bundle.encode_image(images, prompts)


def meta_net(state: PromptState, feats: torch.Tensor) -> torch.Tensor:
    t = state.tensors
    h = F.relu(F.linear(feats, t["meta_net.linear1.weight"], t["meta_net.linear1.bias"]))
    return F.linear(h, t["meta_net.linear2.weight"], t["meta_net.linear2.bias"])


def _require(state: PromptState, method: str):
    if state.method != method:
        raise ValueError(f"expected a {method} state, got {state.method}")


def coop_forward(bundle: BackboneBundle, state: PromptState, images: torch.Tensor, vocab) -> torch.Tensor:
    _require(state, "coop")
    tokens = _vocab(bundle, state, vocab)
    return similarity_logits(image_features(bundle, state, images), text_features(bundle, state, tokens), bundle.logit_scale)


def cocoop_forward(bundle: BackboneBundle, state: PromptState, images: torch.Tensor, vocab) -> torch.Tensor:
    _require(state, "cocoop")
    tokens = _vocab(bundle, state, vocab)
    img = image_features(bundle, state, images)
    shifts = meta_net(state, img)
    rows = []
    for i in range(img.shape[0]):
        # one classifier bank per image, same shapes as the CoOp path
        txt = text_features(bundle, state, tokens, state.context + shifts[i])
        rows.append(similarity_logits(img[i : i + 1], txt, bundle.logit_scale))
    return torch.cat(rows, dim=0)


def maple_forward(bundle: BackboneBundle, state: PromptState, images: torch.Tensor, vocab) -> torch.Tensor:
    _require(state, "maple")
    tokens = _vocab(bundle, state, vocab)
    return similarity_logits(image_features(bundle, state, images), text_features(bundle, state, tokens), bundle.logit_scale)


# -- PromptSRC -------------------------------------------------------------------


@dataclass
class PromptSRCOutputs:
    logits: torch.Tensor
    frozen_logits: torch.Tensor
    image_features: torch.Tensor
    frozen_image_features: torch.Tensor
    text_features: torch.Tensor
    frozen_text_features: torch.Tensor


def textual_diversity_targets(bundle: BackboneBundle, classnames: Sequence[str], templates: Sequence[str]) -> torch.Tensor:
    """Per class, the renormalized mean of frozen text features over all templates."""
    if not templates:
        raise ValueError("template list is empty")
    if not classnames:
        raise ValueError("class vocabulary is empty")
    out = []
    with torch.no_grad():
        for name in classnames:
            seqs = [bundle.tokenize_prompt(t.replace("{class}", "{}"), name) for t in templates]
            feats = bundle.encode_text(bundle.embed_tokens(seqs))
            out.append(l2_normalize(feats.mean(dim=0)))
    return torch.stack(out)


def promptsrc_forward(
    bundle: BackboneBundle,
    state: PromptState,
    images: torch.Tensor,
    vocab,
    cfg: MethodConfig | None = None,
    targets: torch.Tensor | None = None,
) -> PromptSRCOutputs:
    _require(state, "promptsrc")
    cfg = cfg or MethodConfig()
    tokens = _vocab(bundle, state, vocab)
    if targets is None:
        targets = textual_diversity_targets(bundle, tokens.classnames, cfg.templates())
    scale = bundle.logit_scale
    img = image_features(bundle, state, images)
    txt = text_features(bundle, state, tokens)
    with torch.no_grad():
        frozen_img = bundle.encode_image(images)
        frozen_logits = similarity_logits(frozen_img, targets, scale)
    return PromptSRCOutputs(similarity_logits(img, txt, scale), frozen_logits, img, frozen_img, txt, targets)


def promptsrc_loss(out: PromptSRCOutputs, labels: torch.Tensor, cfg: MethodConfig | None = None):
    """Cross-entropy plus L1 feature agreement (both branches) and KL logit agreement.

    Returns ``(total, components)``; the KL term is KL(prompted || frozen)
    averaged over the batch.
    """
    cfg = cfg or MethodConfig()
    n_cls = out.logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    ce = F.cross_entropy(out.logits, labels)
    l_img = F.l1_loss(out.image_features, out.frozen_image_features.to(out.image_features.dtype))
    l_txt = F.l1_loss(out.text_features, out.frozen_text_features.to(out.text_features.dtype))
    logp = F.log_softmax(out.logits, dim=1)
    logq = F.log_softmax(out.frozen_logits, dim=1)
    kl = (logp.exp() * (logp - logq)).sum(dim=1).mean()
    total = ce + cfg.lambda_image * l_img + cfg.lambda_text * l_txt + cfg.kl_weight * kl
    parts = {"ce": ce.detach(), "image_l1": l_img.detach(), "text_l1": l_txt.detach(), "kl": kl.detach()}
    return total, parts


# -- dispatch used by training and evaluation --------------------------------------


def forward(bundle: BackboneBundle, state: PromptState, images: torch.Tensor, vocab) -> torch.Tensor:
    if state.method == "coop":
        return coop_forward(bundle, state, images, vocab)
    if state.method == "cocoop":
        return cocoop_forward(bundle, state, images, vocab)
    if state.method == "maple":
        return maple_forward(bundle, state, images, vocab)
    if state.method == "promptsrc":
        tokens = _vocab(bundle, state, vocab)
        return similarity_logits(
            image_features(bundle, state, images), text_features(bundle, state, tokens), bundle.logit_scale
        )
    raise ValueError(f"unsupported method {state.method!r}")


def training_loss(
    bundle: BackboneBundle,
    state: PromptState,
    images: torch.Tensor,
    labels: torch.Tensor,
    vocab,
    cfg: MethodConfig | None = None,
    targets: torch.Tensor | None = None,
):
    if state.method == "promptsrc":
        return promptsrc_loss(promptsrc_forward(bundle, state, images, vocab, cfg, targets), labels, cfg)
    logits = forward(bundle, state, images, vocab)
    ce = F.cross_entropy(logits, labels)
    return ce, {"ce": ce.detach()}


def classifier(bundle: BackboneBundle, state: PromptState, vocab) -> Callable[[torch.Tensor], torch.Tensor]:
    """Images -> logits, with the text side computed once where it is image-independent."""
    tokens = _vocab(bundle, state, vocab)
    if state.method == "cocoop":
        return lambda images: cocoop_forward(bundle, state, images, tokens)
    with torch.no_grad():
        txt = text_features(bundle, state, tokens)

    def run(images):
        with torch.no_grad():
            return similarity_logits(image_features(bundle, state, images), txt, bundle.logit_scale)

    return run
