"""Desk-scale target models: synthetic class clusters and seedable numpy classifiers.

Label noise is the overfitting lever. A model that memorises noisy labels
is confident on its training points and less so elsewhere, which is the
member/nonmember gap membership inference feeds on.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from diffmi.data import ProbeDataset, ProbeRecord
from diffmi.errors import NumericalError, UpstreamFileError, ValidationError

ARCHITECTURES = ("softmax", "mlp")
HIDDEN_UNITS = 64


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    dim: int = 20
    samples_per_class: int = 100
    cluster_spread: float = 0.3
    label_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dim < 1 or self.samples_per_class < 1:
            raise ValidationError("dim and samples_per_class must be positive")
        if not self.cluster_spread > 0:
            raise ValidationError(f"cluster_spread must be > 0, got {self.cluster_spread}")
        if not 0 <= self.label_noise < 0.5:
            raise ValidationError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")


def make_synthetic_dataset(spec: SyntheticSpec, copies: int = 1):
    """Gaussian clusters around means drawn uniformly in ``[0, 1]^dim``.

    ``copies`` multiplies the per-class sample count while keeping the same
    class means, so independent splits of one distribution can be drawn
    from a single call. Exactly ``round(label_noise * n)`` labels are
    reassigned to a different class chosen uniformly. Rows are shuffled.
    Returns ``(features, labels, clean_labels)``.
    """
    rng = np.random.default_rng(spec.seed)
    m, d = spec.num_classes, spec.dim
    means = rng.random((m, d))
    per = spec.samples_per_class * copies
    clean = np.repeat(np.arange(m), per)
    X = means[clean] + spec.cluster_spread * rng.standard_normal((len(clean), d))
    perm = rng.permutation(len(clean))
    X, clean = X[perm], clean[perm]
    y = clean.copy()
    n_flip = int(round(spec.label_noise * len(y)))
    flip = rng.choice(len(y), size=n_flip, replace=False)
    y[flip] = (y[flip] + rng.integers(1, m, size=n_flip)) % m
    return X, y, clean


def stratified_split(labels: np.ndarray, parts: int, seed: int) -> list[np.ndarray]:
    """Split indices into ``parts`` groups with near-equal class counts."""
    rng = np.random.default_rng(seed)
    groups = [[] for _ in range(parts)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for g, chunk in enumerate(np.array_split(idx, parts)):
            groups[g].extend(chunk.tolist())
    return [np.sort(np.asarray(g, dtype=np.int64)) for g in groups]


def softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    Z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Z).sum(axis=1))
    return float(np.mean(logsum - Z[np.arange(len(y)), y]))


def cross_entropy_grad_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/d(logits) = (softmax - onehot) / n."""
    G = softmax(logits)
    G[np.arange(len(y)), y] -= 1.0
    return G / len(y)


@dataclass
class ToyModel:
    architecture: str
    weights: dict
    num_classes: int
    dim: int
    meta: dict = field(default_factory=dict)

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValidationError(f"model expects {self.dim} features, got shape {X.shape}")
        w = self.weights
        if self.architecture == "softmax":
            return X @ w["W"] + w["b"]
        H = np.tanh(X @ w["W1"] + w["b1"])
        return H @ w["W2"] + w["b2"]

    def predict(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "dim": self.dim,
            "weights": {k: v.tolist() for k, v in self.weights.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModel":
        return cls(
            d["architecture"],
            {k: np.asarray(v, dtype=np.float64) for k, v in d["weights"].items()},
            int(d["num_classes"]),
            int(d["dim"]),
            d.get("meta", {}),
        )


def save_model(model: ToyModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_model(path) -> ToyModel:
    path = Path(path)
    if not path.is_file():
        raise UpstreamFileError(f"{path}: no model file; run the train stage first")
    return ToyModel.from_dict(json.loads(path.read_text(encoding="utf-8")))


def init_model(architecture: str, dim: int, num_classes: int, seed: int, hidden: int = HIDDEN_UNITS) -> ToyModel:
    if architecture not in ARCHITECTURES:
        raise ValidationError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
    rng = np.random.default_rng(seed)
    if architecture == "softmax":
        weights = {"W": 0.01 * rng.standard_normal((dim, num_classes)), "b": np.zeros(num_classes)}
    else:
        weights = {
            "W1": rng.standard_normal((dim, hidden)) / np.sqrt(dim),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, num_classes)) / np.sqrt(hidden),
            "b2": np.zeros(num_classes),
        }
    return ToyModel(architecture, weights, num_classes, dim)


def loss_and_grads(model: ToyModel, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient for every weight tensor."""
    w = model.weights
    if model.architecture == "softmax":
        logits = X @ w["W"] + w["b"]
        G = cross_entropy_grad_logits(logits, y)
        return cross_entropy(logits, y), {"W": X.T @ G, "b": G.sum(axis=0)}
    H = np.tanh(X @ w["W1"] + w["b1"])
    logits = H @ w["W2"] + w["b2"]
    G = cross_entropy_grad_logits(logits, y)
    GH = (G @ w["W2"].T) * (1.0 - H * H)
    grads = {"W2": H.T @ G, "b2": G.sum(axis=0), "W1": X.T @ GH, "b1": GH.sum(axis=0)}
    return cross_entropy(logits, y), grads


def train_model(
    X,
    y,
    architecture: str = "mlp",
    epochs: int = 2000,
    lr: float = 0.5,
    seed: int = 0,
    num_classes: Optional[int] = None,
    record_losses: bool = False,
) -> ToyModel:
    """Full-batch gradient descent on mean cross-entropy."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("features must be (n, d) with one label per row")
    if len(np.unique(y)) < 2:
        raise ValidationError("training needs at least 2 classes present")
    m = int(num_classes or y.max() + 1)
    model = init_model(architecture, X.shape[1], m, seed)
    losses = []
    # overflow is caught below as a non-finite loss, so numpy's warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            loss, grads = loss_and_grads(model, X, y)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"training diverged at epoch {epoch} (loss={loss}); lower the learning rate (lr={lr})"
                )
            if record_losses:
                losses.append(loss)
            for k, g in grads.items():
                model.weights[k] -= lr * g
        final_loss = cross_entropy(model.logits(X), y)
    if not np.isfinite(final_loss):
        raise NumericalError(f"training diverged (final loss={final_loss}); lower the learning rate (lr={lr})")
    model.meta = {
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "final_loss": final_loss,
        "train_accuracy": accuracy(model, X, y),
    }
    if record_losses:
        model.meta["losses"] = losses
    return model


def accuracy(model: ToyModel, X, y) -> float:
    return float(np.mean(np.argmax(model.logits(X), axis=1) == np.asarray(y)))


def predict_proba(
    model: ToyModel,
    X,
    ids: Optional[Sequence[str]] = None,
    labels: Optional[Sequence[int]] = None,
    is_member: Optional[Sequence[bool]] = None,
    prefix: str = "s",
) -> ProbeDataset:
    """Probe the model: one simplex-valid record per input row."""
    P = model.predict(X)
    n = len(P)
    ids = [f"{prefix}{i}" for i in range(n)] if ids is None else list(ids)
    recs = []
    for i in range(n):
        recs.append(
            ProbeRecord(
                ids[i],
                tuple(P[i].tolist()),
                None if labels is None else int(labels[i]),
                None if is_member is None else bool(is_member[i]),
            )
        )
    return ProbeDataset(recs, model.num_classes)


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
