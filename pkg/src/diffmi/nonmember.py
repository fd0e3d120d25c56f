"""Nonmember preparation.

Two routes: manufacture inputs that are almost surely outside the training
set (edge operators, noise, uniform random features, or records from a
different domain loaded as an ordinary probe file), or split an existing
target set into rough pseudo-member / pseudo-nonmember halves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from diffmi.data import ProbeDataset
from diffmi.errors import NumericalError, ValidationError
from diffmi.projection import ProjectionSpec, project_many

OPERATORS = ("laplace", "sobel", "scharr")
SEPARATION_METHODS = ("threshold", "kmeans", "agglomerative")
DEFAULT_THRESHOLD_COUNT = 1000

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SCHARR_X = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]])
_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class RawSample:
    features: np.ndarray
    domain_tag: str = "generated"


@dataclass(frozen=True)
class NoiseSpec:
    """``gaussian`` uses ``variance``; ``salt_pepper`` uses ``rate``."""

    kind: str = "gaussian"
    variance: float = 0.01
    rate: float = 0.05

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.variance > 0:
                raise ValidationError(f"gaussian noise variance must be > 0, got {self.variance}")
        elif self.kind == "salt_pepper":
            if not 0 < self.rate <= 1:
                raise ValidationError(f"salt-and-pepper rate must lie in (0, 1], got {self.rate}")
        else:
            raise ValidationError(f"unknown noise kind {self.kind!r}")


@dataclass(frozen=True)
class SeparationSpec:
    method: str = "threshold"
    threshold_count: Optional[int] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in SEPARATION_METHODS:
            raise ValidationError(f"unknown separation method {self.method!r}")
        if self.threshold_count is not None and self.threshold_count < 1:
            raise ValidationError("threshold_count must be positive")

    def count_for(self, n: int) -> int:
        if self.threshold_count is not None:
            return self.threshold_count
        return min(DEFAULT_THRESHOLD_COUNT, max(1, n // 4))


def _correlate3(img: np.ndarray, stencil: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            if stencil[di, dj] != 0.0:
                out += stencil[di, dj] * padded[di:di + h, dj:dj + w]
    return out


def _gradient3(img: np.ndarray, stencil: np.ndarray) -> np.ndarray:
    """Correlation with an antisymmetric x-stencil, taken as weighted right-minus-left differences.

    Differencing first keeps flat regions exactly zero.
    """
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for di in range(3):
        out += stencil[di, 2] * (padded[di:di + h, 2:2 + w] - padded[di:di + h, 0:w])
    return out


def transform_sample(img, op: str) -> np.ndarray:
    """Apply an edge operator to a grayscale grid; borders replicate, output clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValidationError(f"image operators need a 2-D grid of at least 3x3, got shape {img.shape}")
    if op == "laplace":
        out = _correlate3(img, _LAPLACE)
    elif op in ("sobel", "scharr"):
        sx = _SOBEL_X if op == "sobel" else _SCHARR_X
        gx = _gradient3(img, sx)
        gy = _gradient3(img.T, sx).T
        out = np.sqrt(gx * gx + gy * gy)
    else:
        raise ValidationError(f"unknown operator {op!r}; expected one of {OPERATORS}")
    return np.clip(out, 0.0, 1.0)


def perturb_random(x, noise: NoiseSpec, seed: int, clip: bool = True) -> np.ndarray:
    """Additive Gaussian or salt-and-pepper noise.

    ``clip`` keeps Gaussian output in ``[0, 1]`` (image-like inputs); turn it
    off for unbounded tabular features.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if noise.kind == "gaussian":
        out = x + rng.normal(0.0, np.sqrt(noise.variance), size=x.shape)
        return np.clip(out, 0.0, 1.0) if clip else out
    u = rng.random(x.shape)
    out = x.copy()
    half = noise.rate / 2.0
    out[u < half] = 0.0
    out[(u >= half) & (u < noise.rate)] = 1.0
    return out


def generate_random(shape, seed: int) -> RawSample:
    """Uniform [0, 1] features of the given shape (an int means a flat vector)."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if not shape or any(int(s) != s or s < 1 for s in shape):
        raise ValidationError(f"invalid sample shape {shape}")
    rng = np.random.default_rng(seed)
    return RawSample(rng.random(shape), "random")


def _kmeans_2(X: np.ndarray, rng: np.random.Generator, max_iter: int = 100) -> Optional[np.ndarray]:
    """2-means with k-means++ seeding; None when a cluster comes out empty."""
    n = len(X)
    first = X[rng.integers(n)]
    d2 = ((X - first) ** 2).sum(axis=1)
    total = d2.sum()
    if not total > 0:
        return None
    second = X[rng.choice(n, p=d2 / total)]
    centers = np.vstack([first, second])
    assign = None
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if np.all(new == 0) or np.all(new == 1):
            return None
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centers = np.vstack([X[assign == c].mean(axis=0) for c in (0, 1)])
    return assign


def _cluster(feats: np.ndarray, spec: SeparationSpec) -> np.ndarray:
    if spec.method == "agglomerative":
        if np.ptp(feats, axis=0).max() == 0:
            raise NumericalError("agglomerative separation: all projected vectors are identical")
        labels = fcluster(linkage(feats, method="average"), t=2, criterion="maxclust") - 1
        if len(np.unique(labels)) != 2:
            raise NumericalError("agglomerative separation did not produce two clusters")
        return labels
    rng = np.random.default_rng(spec.rng_seed)
    for _ in range(2):
        labels = _kmeans_2(feats, rng)
        if labels is not None:
            return labels
    raise NumericalError("k-means separation left a cluster empty after re-seeding")


def separate_projected(ids: Sequence[str], P: np.ndarray, feats: np.ndarray, spec: SeparationSpec):
    """Rough split from raw probabilities ``P`` and their projections ``feats``."""
    n = len(ids)
    top1 = np.asarray(P, dtype=np.float64).max(axis=1)
    if spec.method == "threshold":
        count = spec.count_for(n)
        if count >= n:
            raise ValidationError(f"threshold separation needs more than {count} records, got {n}")
        order = sorted(range(n), key=lambda i: (top1[i], ids[i]))
        low = set(order[:count])
    else:
        if n < 4:
            raise ValidationError(f"clustering separation needs at least 4 records, got {n}")
        labels = _cluster(np.asarray(feats, dtype=np.float64), spec)
        means = [top1[labels == c].mean() for c in (0, 1)]
        nonmem_cluster = 0 if means[0] < means[1] else 1
        low = {i for i in range(n) if labels[i] == nonmem_cluster}
    pseudo_nonmem = [ids[i] for i in range(n) if i in low]
    pseudo_target = [ids[i] for i in range(n) if i not in low]
    return pseudo_nonmem, pseudo_target


def rough_separation(dataset: ProbeDataset, spec: SeparationSpec, projection: ProjectionSpec):
    """Split a target set into ``(pseudo-nonmember ids, pseudo-target ids)``.

    ``threshold`` takes the records with the lowest top-1 probability
    (ties by ascending id); the clustering methods split the projected
    vectors in two and call the lower-confidence cluster nonmember.
    """
    dataset = dataset.blind()
    P = dataset.probs_matrix()
    labels = dataset.true_labels() if projection.needs_true_label else None
    feats = project_many(P, labels, projection) if len(dataset) else P
    return separate_projected(dataset.ids, P, feats, spec)
