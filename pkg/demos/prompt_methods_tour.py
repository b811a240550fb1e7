"""
Prompt methods on the micro backbone
====================================

A few seconds on a CPU. The micro backbone has the layout of a CLIP ViT-B/16
with toy sizes and random weights, so accuracies mean nothing here; what this
shows is the shape of each method and the training loop.
"""

import numpy as np
import torch

from rsprompt.backbone import micro_backbone
from rsprompt.prompts import (
    MethodConfig,
    build_zeroshot_classifier,
    coop_forward,
    gaussian_weights,
    init_state,
    zeroshot_logits,
)
from rsprompt.train import TrainConfig, train

torch.manual_seed(0)
bundle = micro_backbone(0)
classes = ["dense residential", "forest", "river"]
# micro encoders have two layers, so deep prompts stop at depth 2
method_cfg = MethodConfig(prompt_depth=2, meta_net_reduction=4, n_templates=8)

# two noisy copies of three base images
base = torch.randn(3, 3, 32, 32)
images = torch.cat([base + 0.1 * torch.randn_like(base) for _ in range(2)])
labels = torch.tensor([0, 1, 2, 0, 1, 2])

# CoOp starts from the embeddings of "a photo of a", so before any step it
# scores exactly like the handcrafted prompt "a photo of a {}."
coop = init_state(bundle, "coop")
zs = zeroshot_logits(bundle, build_zeroshot_classifier(bundle, classes, "a photo of a {}."), images)
print("init gap vs zero-shot:", float((coop_forward(bundle, coop, images, classes) - zs).abs().max()))

for method in ("coop", "cocoop", "maple", "promptsrc"):
    state = init_state(bundle, method, method_cfg)
    sizes = {k: tuple(v.shape) for k, v in state.tensors.items()}
    res = train(bundle, method, images, labels, classes, TrainConfig(epochs=10, batch_size=3), method_cfg)
    first, last = res.history[0]["loss"], res.history[-1]["loss"]
    print(f"{method:10s} loss {first:.3f} -> {last:.3f}  tensors {sizes}")

# PromptSRC averages its per-epoch snapshots with Gaussian weights centred mid-run
w = gaussian_weights(50)
print("ensemble weight peak at epoch", int(np.argmax(w)) + 1, "sum", round(float(w.sum()), 12))
