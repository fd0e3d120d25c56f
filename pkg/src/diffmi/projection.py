"""Projections of m-class probability vectors onto k ranked features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from diffmi.errors import CapabilityError, ValidationError

KINDS = ("sorted_all", "top_k", "top_k_plus_true")


@dataclass(frozen=True)
class ProjectionSpec:
    kind: str = "top_k"
    k: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown projection {self.kind!r}; expected one of {KINDS}")
        if self.kind != "sorted_all" and self.k < 1:
            raise ValidationError(f"projection k must be positive, got {self.k}")

    @property
    def needs_true_label(self) -> bool:
        return self.kind == "top_k_plus_true"

    def output_dim(self, m: int) -> int:
        if self.kind == "sorted_all":
            return m
        if self.k > m:
            raise ValidationError(f"projection k={self.k} exceeds the {m} available classes")
        return self.k

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionSpec":
        return cls(**d)


def _descending_order(P: np.ndarray) -> np.ndarray:
    # stable sort on the negated values: ties keep ascending class index
    return np.argsort(-P, axis=1, kind="stable")


def project(probs: Sequence[float], true_label: Optional[int], spec: ProjectionSpec) -> np.ndarray:
    """Project a single probability vector.

    >>> project([0.2, 0.5, 0.3], 0, ProjectionSpec("top_k_plus_true", 3)).tolist()
    [0.5, 0.3, 0.2]
    """
    labels = None if true_label is None else [true_label]
    return project_many(np.asarray(probs, dtype=np.float64)[None, :], labels, spec)[0]


def project_many(P, true_labels, spec: ProjectionSpec) -> np.ndarray:
    """Row-wise :func:`project` over an ``(n, m)`` matrix."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ValidationError(f"expected an (n, m) probability matrix, got shape {P.shape}")
    n, m = P.shape
    k = spec.output_dim(m)
    ranked = np.take_along_axis(P, _descending_order(P), axis=1)
    if spec.kind == "sorted_all":
        return ranked
    if spec.kind == "top_k":
        return ranked[:, :k]

    if true_labels is None or any(t is None for t in true_labels):
        raise CapabilityError("top_k_plus_true projection needs the ground-truth label of every record")
    labels = np.asarray(true_labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValidationError("one true label per row is required")
    if np.any((labels < 0) | (labels >= m)):
        raise ValidationError(f"true labels must lie in [0, {m})")
    truth = P[np.arange(n), labels]
    return np.column_stack([ranked[:, :k - 1], truth])
