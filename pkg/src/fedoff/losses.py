"""Loss functions for the training loop and the bound suite.

Three kinds: quadratic regression and binary logistic classification (convex,
used by the bound suite) and a small two-layer MLP classifier (non-convex,
used by the experiment harness). Parameters are always flat vectors; each loss
knows how to unpack its own.
"""

from __future__ import annotations

import numpy as np


class LossError(ValueError):
    pass


def _check_dataset(features: np.ndarray, labels: np.ndarray) -> None:
    if len(labels) == 0:
        raise LossError("empty dataset")


class QuadraticLoss:
    """Mean squared-error regression: f(w, x, y) = 0.5 * (w.x - y)^2."""

    kind = "quadratic"
    convex = True

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.param_dim = feature_dim

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.param_dim)

    def value(self, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
        _check_dataset(features, labels)
        resid = features @ w - labels
        return float(0.5 * np.mean(resid ** 2))

    def grad(self, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        _check_dataset(features, labels)
        resid = features @ w - labels
        return features.T @ resid / len(labels)

    def predict(self, w: np.ndarray, features: np.ndarray) -> np.ndarray:
        return features @ w


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LogisticLoss:
    """Binary logistic regression with labels in {0, 1}."""

    kind = "logistic"
    convex = True

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.param_dim = feature_dim

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.param_dim)

    def value(self, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
        _check_dataset(features, labels)
        z = features @ w
        return float(np.mean(np.logaddexp(0.0, z) - labels * z))

    def grad(self, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        _check_dataset(features, labels)
        z = features @ w
        return features.T @ (_sigmoid(z) - labels) / len(labels)

    def predict(self, w: np.ndarray, features: np.ndarray) -> np.ndarray:
        return (features @ w > 0).astype(int)


class MlpLoss:
    """Two-layer ReLU network with softmax cross-entropy output."""

    kind = "mlp"
    convex = False

    def __init__(self, feature_dim: int, num_classes: int, hidden_dim: int = 16):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.param_dim = (feature_dim * hidden_dim + hidden_dim
                          + hidden_dim * num_classes + num_classes)

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(0)
        m, h, c = self.feature_dim, self.hidden_dim, self.num_classes
        w1 = rng.normal(scale=1.0 / np.sqrt(m), size=(m, h))
        w2 = rng.normal(scale=1.0 / np.sqrt(h), size=(h, c))
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def _unpack(self, w: np.ndarray):
        m, h, c = self.feature_dim, self.hidden_dim, self.num_classes
        i = 0
        w1 = w[i:i + m * h].reshape(m, h); i += m * h
        b1 = w[i:i + h]; i += h
        w2 = w[i:i + h * c].reshape(h, c); i += h * c
        b2 = w[i:i + c]
        return w1, b1, w2, b2

    def _forward(self, w: np.ndarray, features: np.ndarray):
        w1, b1, w2, b2 = self._unpack(w)
        z1 = features @ w1 + b1
        hidden = np.maximum(z1, 0.0)
        logits = hidden @ w2 + b2
        return z1, hidden, logits

    def value(self, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
        _check_dataset(features, labels)
        _, _, logits = self._forward(w, features)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        return float(np.mean(lse - logits[np.arange(len(labels)), labels]))

    def grad(self, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        _check_dataset(features, labels)
        n = len(labels)
        z1, hidden, logits = self._forward(w, features)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        dlogits = probs
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        w1, b1, w2, b2 = self._unpack(w)
        dw2 = hidden.T @ dlogits
        db2 = dlogits.sum(axis=0)
        dhidden = dlogits @ w2.T
        dz1 = dhidden * (z1 > 0)
        dw1 = features.T @ dz1
        db1 = dz1.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    def predict(self, w: np.ndarray, features: np.ndarray) -> np.ndarray:
        _, _, logits = self._forward(w, features)
        return logits.argmax(axis=1)


LOSS_KINDS = ("quadratic", "logistic", "mlp")


def make_loss(kind: str, feature_dim: int, num_classes: int = 10,
              hidden_dim: int = 16):
    if kind == "quadratic":
        return QuadraticLoss(feature_dim)
    if kind == "logistic":
        return LogisticLoss(feature_dim)
    if kind == "mlp":
        return MlpLoss(feature_dim, num_classes=num_classes, hidden_dim=hidden_dim)
    raise LossError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def accuracy(loss, w: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Classification accuracy; NaN for regression losses."""
    if loss.kind == "quadratic":
        return float("nan")
    pred = loss.predict(w, features)
    return float(np.mean(pred == labels))
