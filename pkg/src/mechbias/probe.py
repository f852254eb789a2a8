"""Multi-class linear probe over pooled residual vectors.

The probe is ``P(c | h) = softmax(W^T h + b)_c`` with ``W`` of shape
(d_model, n_classes). Column ``W[:, c]`` is the learned direction for class
``c`` and is used downstream for logit-lens and neuron scoring, so features are
never standardised: the directions live in raw residual space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateData, DimensionMismatch, EmptyTestSet, InvalidSpec, SchemaError, UnknownClass
from .model_core.container import read_container, write_container
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

STOP_DELTA = 1e-7
MAX_HALVINGS = 60


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 0.1
    epochs: int = 500
    l2_lambda: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise InvalidSpec(f"lr must be > 0, got {self.lr}", subject="lr")
        if self.epochs < 1:
            raise InvalidSpec(f"epochs must be >= 1, got {self.epochs}", subject="epochs")
        if not (np.isfinite(self.l2_lambda) and self.l2_lambda >= 0):
            raise InvalidSpec(f"l2_lambda must be >= 0, got {self.l2_lambda}", subject="l2_lambda")


@dataclass(frozen=True, eq=False)
class ProbeModel:
    W: np.ndarray  # (d_model, n_classes)
    b: np.ndarray  # (n_classes,)
    class_order: tuple[str, ...]
    trained_on: dict = field(default_factory=dict)
    history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.W.shape[1] != len(self.class_order) or self.b.shape != (len(self.class_order),):
            raise DimensionMismatch("probe weights do not match class_order", subject="probe")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise DegenerateData("probe has non-finite weights", subject="probe")

    @property
    def d_model(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class ProbeMetrics:
    accuracy: float
    macro_f1: float
    confusion: tuple[tuple[int, ...], ...]  # rows = truth, cols = prediction
    per_class_f1: tuple[float, ...]
    class_order: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "confusion": [list(row) for row in self.confusion],
            "per_class_f1": dict(zip(self.class_order, self.per_class_f1)),
            "class_order": list(self.class_order),
            "n": int(sum(map(sum, self.confusion))),
        }


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(
    W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray, l2_lambda: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``l2_lambda * ||W||^2`` and its gradient.

    ``y`` holds integer class indices. The bias is not regularised.
    """
    n = X.shape[0]
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), y]) + l2_lambda * np.sum(W * W))
    P = np.exp(z - logsum[:, None])
    P[np.arange(n), y] -= 1.0
    gW = X.T @ P / n + 2.0 * l2_lambda * W
    gb = P.mean(axis=0)
    return loss, gW, gb


def _prepare(features: Sequence[tuple[np.ndarray, str]], class_order: Sequence[str] | None):
    if not features:
        raise DegenerateData("no training features", subject="features")
    dims = {np.shape(v) for v, _ in features}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"feature vectors have inconsistent shapes {sorted(dims)}", subject="features")
    labels = sorted({label for _, label in features})
    if class_order is None:
        class_order = tuple(labels)
    class_order = tuple(class_order)
    index = {c: i for i, c in enumerate(class_order)}
    for label in labels:
        if label not in index:
            raise UnknownClass(f"label {label!r} not in class order {class_order}", subject=label)
    if len(labels) < 2:
        raise DegenerateData(f"need at least 2 classes, got {labels}", subject="features")
    X = np.array([np.asarray(v, dtype=np.float64) for v, _ in features])
    if not np.isfinite(X).all():
        raise DegenerateData("non-finite feature values", subject="features")
    y = np.array([index[label] for _, label in features], dtype=np.int64)
    # Canonical row order makes full-batch sums independent of input order.
    keys = [y[i].tobytes() + X[i].tobytes() for i in range(len(y))]
    order = sorted(range(len(y)), key=keys.__getitem__)
    return X[order], y[order], class_order


def train_probe(
    features: Sequence[tuple[np.ndarray, str]],
    hyper: ProbeHyper | None = None,
    *,
    class_order: Sequence[str] | None = None,
    trained_on: dict | None = None,
) -> ProbeModel:
    """Full-batch gradient descent with step rejection.

    A step that would raise the loss is discarded and the learning rate halved,
    so the recorded loss history is non-increasing. Training stops after
    ``hyper.epochs`` accepted steps or once an accepted step improves the loss
    by less than ``STOP_DELTA``.
    """
    hyper = hyper or ProbeHyper()
    X, y, class_order = _prepare(features, class_order)
    d, C = X.shape[1], len(class_order)
    W = SplitMix64(derive_seed(hyper.seed, "probe-init")).normal((d, C), scale=0.01)
    b = np.zeros(C)
    lr = hyper.lr
    loss, gW, gb = loss_and_grad(W, b, X, y, hyper.l2_lambda)
    history = [loss]
    for _ in range(hyper.epochs):
        for _ in range(MAX_HALVINGS):
            W_new, b_new = W - lr * gW, b - lr * gb
            new_loss, new_gW, new_gb = loss_and_grad(W_new, b_new, X, y, hyper.l2_lambda)
            if new_loss <= loss:
                break
            lr *= 0.5
        else:
            log.debug("no descent step found; stopping")
            break
        delta = loss - new_loss
        W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
        history.append(loss)
        if delta < STOP_DELTA:
            break
    if not np.isfinite(loss):
        raise DegenerateData("probe training diverged", subject="probe")
    log.info("probe trained: %d steps, loss %.6f, final lr %.3g", len(history) - 1, loss, lr)
    return ProbeModel(W=W, b=b, class_order=class_order, trained_on=dict(trained_on or {}), history=tuple(history))


def predict_proba(probe: ProbeModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != probe.d_model:
        raise DimensionMismatch(f"expected dimension {probe.d_model}, got {X.shape[-1]}", subject="vector")
    return softmax(X @ probe.W + probe.b)


def probe_predict(probe: ProbeModel, vector: np.ndarray) -> np.ndarray:
    """Probability vector over ``probe.class_order``."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionMismatch("probe_predict takes a single vector", subject="vector")
    return predict_proba(probe, vector[None, :])[0]


def predict_label(probe: ProbeModel, vector: np.ndarray) -> str:
    # np.argmax returns the first maximum, i.e. ties go to the earlier class
    return probe.class_order[int(np.argmax(probe_predict(probe, vector)))]


def f1_scores(confusion: np.ndarray) -> np.ndarray:
    """Per-class F1 from a confusion matrix; 0 for classes never seen or predicted."""
    confusion = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def metrics_from_confusion(confusion: np.ndarray, class_order: Sequence[str]) -> ProbeMetrics:
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    if total == 0:
        raise EmptyTestSet("no test examples", subject="test")
    f1 = f1_scores(confusion)
    return ProbeMetrics(
        accuracy=float(np.trace(confusion) / total),
        macro_f1=float(f1.mean()),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        per_class_f1=tuple(float(v) for v in f1),
        class_order=tuple(class_order),
    )


def evaluate_probe(probe: ProbeModel, features: Sequence[tuple[np.ndarray, str]]) -> ProbeMetrics:
    if not features:
        raise EmptyTestSet("no test examples", subject="test")
    index = {c: i for i, c in enumerate(probe.class_order)}
    C = len(index)
    confusion = np.zeros((C, C), dtype=np.int64)
    X = np.array([np.asarray(v, dtype=np.float64) for v, _ in features])
    pred = np.argmax(predict_proba(probe, X), axis=1)
    for (_, label), p in zip(features, pred):
        if label not in index:
            raise UnknownClass(f"label {label!r} not in class order {probe.class_order}", subject=label)
        confusion[index[label], p] += 1
    return metrics_from_confusion(confusion, probe.class_order)


def probe_direction(probe: ProbeModel, label: str) -> np.ndarray:
    """Column ``w_c`` of the probe weights (bias excluded)."""
    if label not in probe.class_order:
        raise UnknownClass(f"label {label!r} not in class order {probe.class_order}", subject=label)
    return probe.W[:, probe.class_order.index(label)].copy()


def save_probe(probe: ProbeModel, manifest_path: str | Path) -> Path:
    return write_container(
        manifest_path,
        {"W_Race": probe.W, "b": probe.b},
        kind="probe",
        extra={"class_order": list(probe.class_order), "trained_on": probe.trained_on},
    )


def load_probe(manifest_path: str | Path) -> ProbeModel:
    manifest, tensors = read_container(manifest_path)
    if manifest.get("kind") != "probe" or "class_order" not in manifest:
        raise SchemaError("not a probe manifest", subject=str(manifest_path))
    return ProbeModel(
        W=tensors["W_Race"].astype(np.float64),
        b=tensors["b"].astype(np.float64),
        class_order=tuple(manifest["class_order"]),
        trained_on=manifest.get("trained_on", {}),
    )
