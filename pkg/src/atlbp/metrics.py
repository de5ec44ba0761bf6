"""Confusion-matrix metrics and reference baselines.

Confusion matrices are oriented rows = ground truth, columns = prediction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from . import numgrad as ng
from .data import LABEL_NAMES
from .errors import UsageError


def confusion_matrix(truths: Sequence[int], predictions: Sequence[int], num_classes: int) -> np.ndarray:
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if truths.shape != predictions.shape:
        raise UsageError(f"{truths.size} truths vs {predictions.size} predictions")
    for arr in (truths, predictions):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise UsageError(f"label outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truths, predictions), 1)
    return cm


def _as_square(confusion) -> np.ndarray:
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise UsageError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise UsageError("confusion matrix has negative entries")
    return cm


def per_class_f_scores(confusion) -> np.ndarray:
    """F1 for every class; any zero denominator yields 0."""
    cm = _as_square(confusion).astype(np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def active_classes(confusion) -> np.ndarray:
    """Mask of classes that occur in the truths or the predictions."""
    cm = _as_square(confusion)
    return (cm.sum(axis=0) + cm.sum(axis=1)) > 0


def mean_f_score(confusion, include_absent: bool = False) -> tuple[float, np.ndarray]:
    """Macro-averaged F1 and the per-class vector.

    Classes that appear neither as truth nor as prediction are left out of
    the average unless ``include_absent`` is set.
    """
    f = per_class_f_scores(confusion)
    mask = np.ones_like(f, dtype=bool) if include_absent else active_classes(confusion)
    if not mask.any():
        return 0.0, f
    return float(f[mask].mean()), f


def accuracy(confusion) -> float:
    cm = _as_square(confusion)
    total = cm.sum()
    if total == 0:
        raise UsageError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class_f: np.ndarray
    mean_f: float
    accuracy: float
    n_samples: int
    per_user: dict = field(default_factory=dict)
    label_names: list = field(default_factory=lambda: list(LABEL_NAMES))

    @classmethod
    def from_predictions(cls, truths, predictions, num_classes: int, users=None, label_names=None):
        cm = confusion_matrix(truths, predictions, num_classes)
        report = cls.from_confusion(cm, label_names)
        if users is not None:
            by_user: dict[str, tuple[list, list]] = {}
            for u, t, p in zip(users, truths, predictions):
                by_user.setdefault(u, ([], []))
                by_user[u][0].append(t)
                by_user[u][1].append(p)
            for u in sorted(by_user):
                sub = confusion_matrix(*by_user[u], num_classes)
                mf, _ = mean_f_score(sub)
                report.per_user[u] = {"n_samples": int(sub.sum()), "mean_f": mf, "accuracy": accuracy(sub)}
        return report

    @classmethod
    def from_confusion(cls, confusion, label_names=None):
        cm = _as_square(confusion).astype(np.int64)
        n = int(cm.sum())
        mf, per_class = mean_f_score(cm)
        names = list(label_names) if label_names is not None else (
            list(LABEL_NAMES) if cm.shape[0] == len(LABEL_NAMES) else [str(c) for c in range(cm.shape[0])]
        )
        return cls(cm, per_class, mf, accuracy(cm) if n else 0.0, n, label_names=names)

    def to_dict(self) -> dict:
        return {
            "orientation": "rows=truth, cols=predicted",
            "labels": self.label_names,
            "confusion": self.confusion.tolist(),
            "per_class_f": {name: float(f) for name, f in zip(self.label_names, self.per_class_f)},
            "mean_f": self.mean_f,
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "per_user": self.per_user,
        }


# --------------------------------------------------------------------------
# baselines

@dataclass
class PredominantLabel:
    label: int

    def predict(self, segment=None) -> int:
        return self.label


def predominant_label_baseline(train_labels: Sequence[int]) -> PredominantLabel:
    """Constant predictor of the most frequent training label (lowest code on ties)."""
    labels = np.asarray(list(train_labels), dtype=np.int64)
    if labels.size == 0:
        raise UsageError("predominant-label baseline needs at least one training label")
    counts = np.bincount(labels)
    return PredominantLabel(int(np.argmax(counts)))


class PooledClassifier:
    """Non-temporal reference: time-averaged fused features into affine + softmax.

    Uses the same compression layers as the temporal model; the head starts
    at zero so an untrained classifier predicts the uniform distribution.
    """

    def __init__(self, config: mdl.ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params = {}
        if config.uses_affect:
            k = 1.0 / np.sqrt(config.dim_rho)
            self.params["ca.W"] = rng.uniform(-k, k, (config.dim_ca, config.dim_rho))
            self.params["ca.b"] = np.zeros(config.dim_ca)
        if config.uses_identity:
            k = 1.0 / np.sqrt(config.dim_xi)
            self.params["cv.W"] = rng.uniform(-k, k, (config.dim_cv, config.dim_xi))
            self.params["cv.b"] = np.zeros(config.dim_cv)
        self.params["head.W"] = np.zeros((config.num_classes, config.fused_dim))
        self.params["head.b"] = np.zeros(config.num_classes)

    def _pooled(self, segment, tape=None, p=None):
        cfg = self.config
        p = p if p is not None else self.params
        psi = np.asarray(segment.psi).mean(axis=0)
        ca = cv = None
        act = ng.tanh if cfg.compress_activation == "tanh" else None
        if cfg.uses_affect:
            ca = ng.apply_affine(p["ca.W"], p["ca.b"], np.asarray(segment.rho).mean(axis=0))
            ca = act(ca) if act else ca
        if cfg.uses_identity:
            cv = ng.apply_affine(p["cv.W"], p["cv.b"], np.asarray(segment.xi).mean(axis=0))
            cv = act(cv) if act else cv
        return mdl.fuse_features(psi, ca, cv)

    def pooled_features(self, segment) -> np.ndarray:
        return self._pooled(segment)

    def loss_and_grad(self, segment):
        tape = ng.GradTape()
        p = {n: tape.param(n, v) for n, v in self.params.items()}
        logits = ng.apply_affine(p["head.W"], p["head.b"], self._pooled(segment, tape, p))
        loss = ng.softmax_cross_entropy(logits, int(segment.label))
        return float(loss.value), ng.backward(tape, loss)

    def probabilities(self, segment) -> np.ndarray:
        x = self._pooled(segment)
        return ng.softmax(ng.apply_affine(self.params["head.W"], self.params["head.b"], x))

    def predict(self, segment) -> int:
        return int(np.argmax(self.probabilities(segment)))


def mean_pool_baseline(config: mdl.ModelConfig, segments) -> PooledClassifier:
    """Train the pooled classifier with the temporal model's optimizer settings."""
    segments = list(segments)
    if not segments:
        raise UsageError("empty training set")
    rng = np.random.default_rng(config.seed)
    clf = PooledClassifier(config, rng)
    state = ng.AdamState.for_params(
        clf.params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps
    )
    for _ in range(config.epochs):
        for j in rng.permutation(len(segments)):
            _, grads = clf.loss_and_grad(segments[j])
            ng.adam_step(state, clf.params, grads, clip_norm=config.clip_norm)
    return clf
