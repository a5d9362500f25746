"""Classification metrics and the proxy A-distance."""

from __future__ import annotations

import numpy as np

from ..diffmath import ShapeError, UsageError


def _pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise ShapeError("metrics need at least one sample")
    return p, y


def accuracy(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return float(np.mean(p == y))


def precision_recall_f1(predictions, labels, positive_class: int = 1) -> tuple[float, float, float]:
    """Binary P/R/F1 for ``positive_class``; an empty denominator yields 0."""
    p, y = _pair(predictions, labels)
    pred_pos, true_pos = p == positive_class, y == positive_class
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def a_distance_from_error(eps: float) -> float:
    eps = min(max(eps, 0.0), 0.5)
    return 2.0 * (1.0 - 2.0 * eps)


def _fit_logistic(X: np.ndarray, y: np.ndarray, epochs: int, lr: float) -> tuple[np.ndarray, float]:
    w = np.zeros(X.shape[1])
    b = 0.0
    n = X.shape[0]
    for _ in range(epochs):
        z = X @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = p - y
        w -= lr * (X.T @ g) / n
        b -= lr * g.mean()
    return w, b


def proxy_a_distance(emb_s, emb_t, seed: int = 0, epochs: int = 200, lr: float = 0.5) -> float:
    """2(1 - 2 eps) with eps the held-out error of a linear logistic domain classifier.

    Each domain is split 50/50 into train and test halves.
    """
    Xs, Xt = np.asarray(emb_s, dtype=np.float64), np.asarray(emb_t, dtype=np.float64)
    if Xs.ndim != 2 or Xt.ndim != 2 or Xs.shape[1] != Xt.shape[1]:
        raise ShapeError(f"embedding sets must be matrices of equal width, got {Xs.shape} and {Xt.shape}")
    if Xs.shape[0] < 20 or Xt.shape[0] < 20:
        raise UsageError(f"proxy A-distance needs >= 20 samples per domain, got {Xs.shape[0]} and {Xt.shape[0]}")
    rng = np.random.default_rng(seed)
    ps, pt = rng.permutation(Xs.shape[0]), rng.permutation(Xt.shape[0])
    hs, ht = Xs.shape[0] // 2, Xt.shape[0] // 2
    X_train = np.vstack([Xs[ps[:hs]], Xt[pt[:ht]]])
    y_train = np.concatenate([np.ones(hs), np.zeros(ht)])
    X_test = np.vstack([Xs[ps[hs:]], Xt[pt[ht:]]])
    y_test = np.concatenate([np.ones(Xs.shape[0] - hs), np.zeros(Xt.shape[0] - ht)])
    mu, sd = X_train.mean(axis=0), X_train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    w, b = _fit_logistic((X_train - mu) / sd, y_train, epochs, lr)
    pred = ((X_test - mu) / sd) @ w + b > 0
    eps = float(np.mean(pred != (y_test == 1)))
    return a_distance_from_error(eps)
