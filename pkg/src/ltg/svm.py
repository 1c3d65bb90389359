"""Axis-histogram linear classifier, the comparison baseline.

Features are per-channel column and row occupancy sums of the resized
raster, normalized by the grid edge; training is one-vs-rest hinge loss
with L2 shrinkage by seeded per-sample subgradient steps.  The
not-generatable class is an ordinary one-vs-rest class here: the baseline
has no confidence threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, nn
from .errors import DataError, DimError, FormatError
from .model import ClassRegistry, Prediction, top_k
from .raster import RasterConfig, resize_to_target

SVM_MAGIC = b"LTGS"


def extract_histograms(stack: np.ndarray) -> np.ndarray:
    """Column-sum and row-sum vectors per channel, each normalized by the
    edge length, concatenated channel-major with x before y."""
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise DimError(f"expected a square (C, S, S) stack, got {stack.shape}")
    s = stack.shape[1]
    x_hist = stack.sum(axis=1) / s   # per column
    y_hist = stack.sum(axis=2) / s   # per row
    return np.concatenate([x_hist, y_hist], axis=1).reshape(-1)


def features_for(natives: list[np.ndarray], cfg: RasterConfig) -> np.ndarray:
    """Histogram features of natives after standard resizing."""
    return np.stack([extract_histograms(resize_to_target(nat, cfg))
                     for nat in natives])


@dataclass
class SvmConfig:
    lam: float = 1e-4
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0


@dataclass
class SvmModel:
    weights: np.ndarray  # (K, D)
    biases: np.ndarray   # (K,)
    registry: ClassRegistry

    def scores(self, feature: np.ndarray) -> np.ndarray:
        return self.weights @ feature + self.biases


def train_svm(features: np.ndarray, labels: np.ndarray,
              registry: ClassRegistry, cfg: SvmConfig = SvmConfig()
              ) -> SvmModel:
    """One-vs-rest hinge + L2 by per-sample subgradient steps.

    Each step takes the hinge subgradient for every class at once, then
    shrinks the weights by the regularization factor, so the model decays
    to zero as lam grows.  Deterministic for a fixed seed.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise DimError("features must be (N, D) aligned with labels")
    if len(np.unique(labels)) < 2:
        raise DataError("training needs at least two distinct classes")
    k = registry.class_count
    d = features.shape[1]
    w = np.zeros((k, d))
    b = np.zeros(k)
    shrink = max(0.0, 1.0 - 2.0 * cfg.lr * cfg.lam)
    rng = np.random.default_rng(cfg.seed)
    targets = np.where(labels[None, :] == np.arange(k)[:, None], 1.0, -1.0)
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(features)):
            x = features[i]
            t = targets[:, i]
            active = t * (w @ x + b) < 1.0
            push = np.where(active, t, 0.0)
            w += cfg.lr * np.outer(push, x)
            w *= shrink
            b += cfg.lr * push
    return SvmModel(w, b, registry)


def predict_feature(model: SvmModel, feature: np.ndarray,
                    top: int = 3) -> Prediction:
    """Argmax over class scores; ties go to the lower index."""
    scores = model.scores(np.asarray(feature, dtype=np.float64))
    star = int(np.argmax(scores))
    ranked = top_k(scores, top)
    return Prediction(star, float(scores[star]),
                      star == model.registry.ng_index, ranked)


def evaluate_svm(model: SvmModel, features: np.ndarray, labels: np.ndarray,
                 top: int = 3) -> tuple[metrics.MetricsReport, list[Prediction]]:
    preds = [predict_feature(model, f, top) for f in features]
    counts = metrics.tally(preds, labels, model.registry.ng_index)
    topk = {k: metrics.topk_accuracy(preds, labels, k)
            for k in range(1, top + 1)}
    return metrics.MetricsReport(counts, topk, []), preds


def save_svm(path, model: SvmModel) -> None:
    config = {"registry": model.registry.to_dict(),
              "feature_len": int(model.weights.shape[1])}
    nn.save_arrays(path, SVM_MAGIC, config,
                   {"weights": model.weights, "biases": model.biases})


def load_svm(path) -> SvmModel:
    config, arrays = nn.load_arrays(path, SVM_MAGIC)
    try:
        registry = ClassRegistry.from_dict(config["registry"])
        feature_len = config["feature_len"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed baseline config: {exc}") from None
    w, b = arrays.get("weights"), arrays.get("biases")
    if w is None or b is None:
        raise FormatError(f"{path}: missing weight arrays")
    if w.shape != (registry.class_count, feature_len) or \
            b.shape != (registry.class_count,):
        raise FormatError(f"{path}: weight shapes {w.shape}/{b.shape} do not "
                          f"match the registry")
    return SvmModel(w.astype(np.float64), b.astype(np.float64), registry)
