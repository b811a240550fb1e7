"""
Linear probe and the C search
=============================

Multinomial logistic regression on fixed features. The regularization strength
is picked on a held-out split: a log grid first, then bisection around the best
grid point.
"""

import numpy as np

from rsprompt.probe import COARSE_GRID, FeatureTable, evaluate_probe, fit_probe, search_C

rng = np.random.default_rng(0)
centres = rng.normal(size=(4, 16))


def draw(n_per_class):
    x = np.vstack([c + 1.2 * rng.normal(size=(n_per_class, 16)) for c in centres])
    x /= np.linalg.norm(x, axis=1, keepdims=True)  # CLIP features are unit norm too
    return FeatureTable(x, np.repeat(np.arange(4), n_per_class))


train, val, test = draw(16), draw(4), draw(200)
print("coarse grid:", np.round(np.log10(COARSE_GRID), 2))

best, trace = search_C(train, val, num_classes=4)
for c, acc in trace:
    print(f"  log10 C = {np.log10(c):6.3f}  val acc = {acc:.3f}")
print("chosen C:", best)

model = fit_probe(train, best, 4)
print(f"converged={model.converged} after {model.n_iter} L-BFGS iterations, objective {model.loss:.4f}")
print("test top-1:", evaluate_probe(model, test).accuracy)
