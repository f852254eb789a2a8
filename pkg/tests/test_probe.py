from __future__ import annotations

import numpy as np
import pytest

from mechbias.errors import DegenerateData, DimensionMismatch, EmptyTestSet, UnknownClass
from mechbias.probe import (
    ProbeHyper,
    ProbeModel,
    evaluate_probe,
    load_probe,
    loss_and_grad,
    metrics_from_confusion,
    predict_label,
    probe_direction,
    probe_predict,
    save_probe,
    train_probe,
)


def blobs(seed=0, n=40, d=2, sep=3.0, classes=("a", "b")):
    rng = np.random.default_rng(seed)
    out = []
    for i, c in enumerate(classes):
        centre = np.zeros(d)
        centre[i % d] = sep
        out += [(centre + rng.normal(scale=0.3, size=d), c) for _ in range(n)]
    return out


def finite_difference_check(W, b, X, y, lam, coords, eps=1e-4):
    _, gW, gb = loss_and_grad(W, b, X, y, lam)
    errs = []
    for kind, idx in coords:
        P = (W if kind == "W" else b).copy()
        plus, minus = P.copy(), P.copy()
        plus[idx] += eps
        minus[idx] -= eps
        if kind == "W":
            lp, lm = loss_and_grad(plus, b, X, y, lam)[0], loss_and_grad(minus, b, X, y, lam)[0]
            analytic = gW[idx]
        else:
            lp, lm = loss_and_grad(W, plus, X, y, lam)[0], loss_and_grad(W, minus, X, y, lam)[0]
            analytic = gb[idx]
        numeric = (lp - lm) / (2 * eps)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return max(errs)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 6))
    y = rng.integers(0, 3, size=30)
    W, b = rng.normal(size=(6, 3)), rng.normal(size=3)
    coords = [("W", (int(rng.integers(6)), int(rng.integers(3)))) for _ in range(8)] + [("b", (0,)), ("b", (2,))]
    assert finite_difference_check(W, b, X, y, 1e-2, coords) < 1e-4


def test_loss_is_reference_cross_entropy():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(5, 3)), np.array([0, 1, 2, 1, 0])
    W, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    ref = 0.0
    for x, c in zip(X, y):
        z = x @ W + b
        ref += -z[c] + np.log(np.sum(np.exp(z)))
    ref = ref / 5 + 0.1 * np.sum(W * W)
    assert loss_and_grad(W, b, X, y, 0.1)[0] == pytest.approx(ref, rel=1e-12)


def test_separable_blobs_reach_full_train_accuracy():
    data = blobs()
    probe = train_probe(data, ProbeHyper(lr=0.5, epochs=500))
    assert evaluate_probe(probe, data).accuracy == 1.0


def test_loss_history_non_increasing():
    probe = train_probe(blobs(seed=3, classes=("a", "b", "c"), d=3), ProbeHyper(lr=5.0, epochs=200))
    h = np.array(probe.history)
    assert np.all(np.diff(h) <= 0)


def test_zero_features_give_priors():
    data = [(np.zeros(4), c) for c in ("a", "b", "c") for _ in range(5)]
    probe = train_probe(data, ProbeHyper(epochs=300, l2_lambda=1e-3))
    assert np.allclose(probe_predict(probe, np.zeros(4)), 1 / 3, atol=1e-4)


def test_training_is_order_invariant():
    data = blobs(seed=4)
    a = train_probe(data)
    b = train_probe(list(reversed(data)))
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_predict_properties():
    probe = ProbeModel(W=np.zeros((3, 3)), b=np.array([1.0, 0.0, 0.0]), class_order=("x", "y", "z"))
    p = probe_predict(probe, np.array([0.3, -1.0, 2.0]))
    assert p.sum() == pytest.approx(1.0)
    assert predict_label(probe, np.zeros(3)) == "x"
    shifted = ProbeModel(W=probe.W, b=probe.b + 7.0, class_order=probe.class_order)
    assert np.allclose(probe_predict(shifted, np.ones(3)), probe_predict(probe, np.ones(3)))
    with pytest.raises(DimensionMismatch):
        probe_predict(probe, np.zeros(4))


def test_metrics_hand_computed():
    m = metrics_from_confusion(np.array([[1, 1], [1, 1]]), ("a", "b"))
    assert m.accuracy == 0.5 and m.macro_f1 == 0.5
    perfect = metrics_from_confusion(np.diag([3, 4, 5]), ("a", "b", "c"))
    assert perfect.accuracy == 1.0 and perfect.macro_f1 == 1.0
    # class c absent from both truth and predictions counts as F1 = 0
    absent = metrics_from_confusion(np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]]), ("a", "b", "c"))
    assert absent.macro_f1 == pytest.approx(2 / 3)
    with pytest.raises(EmptyTestSet):
        metrics_from_confusion(np.zeros((2, 2)), ("a", "b"))


def test_direction_stacks_and_aligns_with_mean_difference():
    data = blobs(seed=5, d=4, sep=2.0)
    probe = train_probe(data, ProbeHyper(lr=0.5, epochs=500))
    stacked = np.stack([probe_direction(probe, c) for c in probe.class_order], axis=1)
    assert np.array_equal(stacked, probe.W)
    X = np.array([v for v, _ in data])
    labels = np.array([c for _, c in data])
    mean_diff = X[labels == "b"].mean(0) - X[labels == "a"].mean(0)
    w = probe_direction(probe, "b") - probe_direction(probe, "a")
    assert w @ mean_diff / (np.linalg.norm(w) * np.linalg.norm(mean_diff)) > 0.99
    with pytest.raises(UnknownClass):
        probe_direction(probe, "zz")


def test_errors():
    with pytest.raises(DegenerateData):
        train_probe([(np.zeros(2), "a"), (np.ones(2), "a")])
    with pytest.raises(DimensionMismatch):
        train_probe([(np.zeros(2), "a"), (np.ones(3), "b")])
    with pytest.raises(EmptyTestSet):
        evaluate_probe(train_probe(blobs()), [])


def test_save_load_round_trip(tmp_path):
    probe = train_probe(blobs(), trained_on={"layer": 1})
    back = load_probe(save_probe(probe, tmp_path / "p.json"))
    assert back.class_order == probe.class_order
    assert back.trained_on == {"layer": 1}
    assert np.array_equal(back.W, probe.W.astype(np.float32).astype(np.float64))
