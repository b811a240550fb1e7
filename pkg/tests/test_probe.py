import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsprompt.data.images import ImageReadError
from rsprompt.data.registry import load_dataset
from rsprompt.probe import (
    COARSE_GRID,
    FeatureTable,
    evaluate_probe,
    extract_features,
    fit_probe,
    probe_objective,
    refine_search,
    search_C,
)

FOUR_X = np.array([[1.0, 0.2], [0.8, -0.3], [-0.5, 0.9], [0.2, 1.1]])
FOUR_Y = np.array([0, 0, 1, 1])


def _gradient_descent_oracle(X, y, C, lr=0.05, steps=200_000):
    """Full-batch descent on summed softmax CE + ||W||^2 / (2C), written independently of the package."""
    n, d = X.shape
    k = y.max() + 1
    W, b = np.zeros((k, d)), np.zeros(k)
    for _ in range(steps):
        Z = X @ W.T + b
        P = np.exp(Z - Z.max(1, keepdims=True))
        P /= P.sum(1, keepdims=True)
        R = P.copy()
        R[np.arange(n), y] -= 1
        gW, gb = R.T @ X + W / C, R.sum(0)
        W -= lr * gW
        b -= lr * gb
        if max(np.abs(gW).max(), np.abs(gb).max()) < 1e-13:
            break
    loss = -np.log(P[np.arange(n), y]).sum() + (W**2).sum() / (2 * C)
    return loss, W


def test_fit_matches_gradient_descent_oracle():
    loss, W = _gradient_descent_oracle(FOUR_X, FOUR_Y, 1.0)
    assert loss == pytest.approx(1.7151684559788245, abs=1e-10)  # frozen oracle output
    model = fit_probe(FeatureTable(FOUR_X, FOUR_Y), 1.0, 2)
    assert model.loss == pytest.approx(loss, abs=1e-6)
    np.testing.assert_allclose(model.weight, W, atol=1e-6)
    assert model.converged and model.n_iter <= 1000


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 3))
    Y = np.eye(3)[rng.integers(0, 3, 7)]
    p = rng.normal(size=3 * 3 + 3)
    _, g = probe_objective(p, X, Y, 0.7)
    eps = 1e-6
    fd = np.array([(probe_objective(p + eps * e, X, Y, 0.7)[0] - probe_objective(p - eps * e, X, Y, 0.7)[0]) / (2 * eps) for e in np.eye(p.size)])
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_bias_unpenalized():
    X, Y = np.zeros((2, 1)), np.eye(2)[[0, 0]]
    p = np.array([0.0, 0.0, 5.0, -5.0])
    loss_big_c, _ = probe_objective(p, X, Y, 1e6)
    loss_small_c, _ = probe_objective(p, X, Y, 1e-6)
    assert loss_big_c == loss_small_c


def test_separable_large_c():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(-2, 0.3, (10, 2)), rng.normal(2, 0.3, (10, 2))])
    y = np.repeat([0, 1], 10)
    model = fit_probe(FeatureTable(X, y), 1e4, 2)
    assert (model.predict(X) == y).all()


def test_tiny_c_collapses_weights():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 4))
    y = np.repeat([0, 1, 2], 4)
    model = fit_probe(FeatureTable(X, y), 1e-9, 3)
    assert np.abs(model.weight).max() < 1e-7
    scores = model.decision_function(X)
    assert np.ptp(scores, axis=1).max() < 1e-6  # balanced classes: near-uniform scores


def test_weight_norm_monotone_in_c():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 5))
    y = rng.integers(0, 3, 30)
    y[:3] = [0, 1, 2]
    norms = [np.linalg.norm(fit_probe(FeatureTable(X, y), c, 3).weight) for c in COARSE_GRID[:7]]
    assert all(b >= a - 1e-9 for a, b in zip(norms, norms[1:]))


def test_fit_deterministic():
    a = fit_probe(FeatureTable(FOUR_X, FOUR_Y), 0.3, 2)
    b = fit_probe(FeatureTable(FOUR_X, FOUR_Y), 0.3, 2)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_missing_class_rejected():
    with pytest.raises(ValueError):
        fit_probe(FeatureTable(FOUR_X, np.array([0, 0, 2, 2])), 1.0, 3)


def test_matches_sklearn():
    sklearn = pytest.importorskip("sklearn.linear_model")
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 6))
    y = rng.integers(0, 4, 40)
    ours = fit_probe(FeatureTable(X, y), 0.5, 4)
    ref = sklearn.LogisticRegression(C=0.5, max_iter=5000, tol=1e-12).fit(X, y)
    np.testing.assert_allclose(ours.decision_function(X).argmax(1), ref.decision_function(X).argmax(1))
    # sklearn also leaves the intercept unpenalized; softmax is shift-invariant per row
    d_ours = ours.decision_function(X) - ours.decision_function(X).mean(1, keepdims=True)
    d_ref = ref.decision_function(X) - ref.decision_function(X).mean(1, keepdims=True)
    np.testing.assert_allclose(d_ours, d_ref, atol=1e-4)


# -- C search --------------------------------------------------------------------------


def test_flat_curve_returns_smallest():
    best, trace = refine_search(lambda c: 0.5)
    assert best == COARSE_GRID[0]
    assert [c for c, _ in trace[:10]] == pytest.approx(list(COARSE_GRID))


@settings(max_examples=60, deadline=None)
@given(st.floats(-3.5, 3.5))
def test_unimodal_peak_found(peak):
    best, trace = refine_search(lambda c: -((np.log10(c) - peak) ** 2))
    spacing = 8 / 9
    assert abs(np.log10(best) - peak) <= 2 * spacing / 2**8 + 1e-12
    assert len(trace) <= 10 + 2 * 8


def test_refinement_capped():
    with pytest.raises(ValueError):
        refine_search(lambda c: 0.0, steps=9)
    calls = []
    refine_search(lambda c: calls.append(c) or -abs(np.log10(c) - 0.123), steps=8)
    assert len(calls) - len(COARSE_GRID) <= 2 * 8


def test_search_c_on_features():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.normal(-1, 1, (8, 3)), rng.normal(1, 1, (8, 3))])
    y = np.repeat([0, 1], 8)
    best, trace = search_C(FeatureTable(X[::2], y[::2]), FeatureTable(X[1::2], y[1::2]), num_classes=2)
    assert best > 0 and len(trace) >= 10
    with pytest.raises(ValueError):
        search_C(FeatureTable(X, y), FeatureTable(np.zeros((0, 3)), np.zeros(0)))


# -- evaluation and features ------------------------------------------------------------


def test_evaluate_probe_perfect_and_single_class():
    X = np.eye(3)
    from rsprompt.probe import ProbeModel

    perfect = ProbeModel(np.eye(3), np.zeros(3), 1.0)
    assert evaluate_probe(perfect, FeatureTable(X, [0, 1, 2])).accuracy == 1.0
    constant = ProbeModel(np.zeros((3, 3)), np.array([0.0, -1.0, -1.0]), 1.0)
    assert evaluate_probe(constant, FeatureTable(X, [0, 0, 0])).accuracy == 1.0
    with pytest.raises(ValueError):
        evaluate_probe(perfect, FeatureTable(np.eye(4), [0, 1, 2, 3]))


def test_extract_features_rows_and_cache(micro, toy_root, tmp_path):
    ds = load_dataset("toy", toy_root)
    items = ds.items("train")[:3]
    items = items + [items[0]]
    table = extract_features(micro, ds.root, items, "toy-train", tmp_path)
    assert table.features.shape == (4, 32)
    assert np.array_equal(table.features[0], table.features[3])
    np.testing.assert_allclose(np.linalg.norm(table.features, axis=1), 1.0, atol=1e-5)
    again = extract_features(micro, ds.root, items, "toy-train", tmp_path)
    assert np.array_equal(again.features, table.features)
    assert len(list(tmp_path.glob("*.npz"))) == 1
    raw = extract_features(micro, ds.root, items, "toy-train", tmp_path, normalize=False)
    assert not np.allclose(np.linalg.norm(raw.features, axis=1), 1.0)


def test_unreadable_image_named(micro, toy_root):
    ds = load_dataset("toy", toy_root)
    with pytest.raises(ImageReadError, match="missing.png"):
        extract_features(micro, ds.root, [("missing.png", 0)])
