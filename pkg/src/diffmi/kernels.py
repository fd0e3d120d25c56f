"""Kernels, the biased empirical MMD, and an incrementally updatable MMD state.

The feature map of each kernel is never materialised; every distance is
written in terms of kernel sums (the kernel trick).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from diffmi.errors import ValidationError

FAMILIES = ("gaussian", "laplacian", "linear", "sigmoid", "polynomial")
_EXPONENTIAL = ("gaussian", "laplacian")

# rows of the left operand processed per block when building Gram matrices
_BLOCK = 256
# accumulator type for MmdState sums (80-bit on x86 Linux, float64 elsewhere)
_EXT = np.longdouble


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and its parameters.

    ``sigma=None`` on an exponential family means "pick by the median
    heuristic when the attack starts"; call :meth:`resolve` to fill it in.
    ``square_distance`` only applies to the Gaussian: ``True`` gives the
    usual RBF ``exp(-||a-b||^2 / (2 sigma^2))``, ``False`` the unsquared
    ``exp(-||a-b|| / (2 sigma^2))`` form.
    """

    family: str = "gaussian"
    sigma: Optional[float] = None
    norm_exponent: Optional[int] = None
    square_distance: bool = True
    degree: Optional[float] = None
    coef: Optional[float] = None
    gamma: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.family in _EXPONENTIAL:
            if self.sigma is not None and not (self.sigma > 0 and math.isfinite(self.sigma)):
                raise ValidationError(f"sigma must be a positive finite real, got {self.sigma}")
            if self.norm_exponent is None:
                object.__setattr__(self, "norm_exponent", 2 if self.family == "gaussian" else 1)
            if self.norm_exponent not in (1, 2):
                raise ValidationError(f"norm_exponent must be 1 or 2, got {self.norm_exponent}")
        else:
            if self.sigma is not None:
                raise ValidationError(f"{self.family} kernel takes no sigma")
            if self.norm_exponent is not None:
                raise ValidationError(f"{self.family} kernel takes no norm_exponent")
        if self.family != "gaussian" and not self.square_distance:
            raise ValidationError("square_distance=False only applies to the gaussian kernel")
        if self.family == "polynomial":
            if self.degree is None or self.degree <= 0:
                raise ValidationError("polynomial kernel needs a positive degree")
            if self.coef is None:
                object.__setattr__(self, "coef", 1.0)
        elif self.degree is not None:
            raise ValidationError(f"{self.family} kernel takes no degree")
        if self.family == "sigmoid":
            if self.coef is None:
                object.__setattr__(self, "coef", 0.0)
        elif self.family != "polynomial" and self.coef is not None:
            raise ValidationError(f"{self.family} kernel takes no coef")

    @property
    def needs_sigma(self) -> bool:
        return self.family in _EXPONENTIAL and self.sigma is None

    def resolve(self, points) -> "KernelSpec":
        """Return a copy with ``sigma`` fixed by the median heuristic over ``points``."""
        if not self.needs_sigma:
            return self
        return replace(self, sigma=median_heuristic_sigma(points))

    def to_dict(self) -> dict:
        out = {"family": self.family}
        if self.family in _EXPONENTIAL:
            out["sigma"] = self.sigma
            out["norm_exponent"] = self.norm_exponent
        if self.family == "gaussian":
            out["square_distance"] = self.square_distance
        if self.family == "polynomial":
            out["degree"] = self.degree
        if self.family in ("polynomial", "sigmoid"):
            out["coef"] = self.coef
            out["gamma"] = self.gamma
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        allowed = {"family", "sigma", "norm_exponent", "square_distance", "degree", "coef", "gamma"}
        unknown = set(d) - allowed
        if unknown:
            raise ValidationError(f"unknown kernel fields: {sorted(unknown)}")
        return cls(**d)


def _as_matrix(X) -> np.ndarray:
    A = np.asarray(X, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ValidationError(f"expected a set of vectors, got array of shape {A.shape}")
    return A


def _require_sigma(spec: KernelSpec) -> float:
    if spec.sigma is None:
        raise ValidationError("kernel sigma is unresolved; call KernelSpec.resolve first")
    return spec.sigma


def gram(A, B, spec: KernelSpec) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(A[i], B[j])``."""
    A = _as_matrix(A)
    B = _as_matrix(B)
    if A.shape[1] != B.shape[1]:
        raise ValidationError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.family == "linear":
        return A @ B.T
    if spec.family == "polynomial":
        return (spec.gamma * (A @ B.T) + spec.coef) ** spec.degree
    if spec.family == "sigmoid":
        return np.tanh(spec.gamma * (A @ B.T) + spec.coef)

    sigma = _require_sigma(spec)
    out = np.empty((A.shape[0], B.shape[0]))
    for start in range(0, A.shape[0], _BLOCK):
        diff = np.abs(A[start:start + _BLOCK, None, :] - B[None, :, :])
        if spec.norm_exponent == 1:
            dist = diff.sum(axis=2)
        else:
            sq = (diff * diff).sum(axis=2)
            dist = sq if (spec.family == "gaussian" and spec.square_distance) else np.sqrt(sq)
        if spec.family == "gaussian":
            out[start:start + _BLOCK] = np.exp(-dist / (2.0 * sigma * sigma))
        else:
            out[start:start + _BLOCK] = np.exp(-dist / sigma)
    return out


def kernel_eval(a: Sequence[float], b: Sequence[float], spec: KernelSpec) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(gram(a[None, :], b[None, :], spec)[0, 0])


def _mmd_from_sums(sxx: float, syy: float, sxy: float, nx: int, ny: int) -> float:
    sq = sxx / (nx * nx) + syy / (ny * ny) - 2.0 * sxy / (nx * ny)
    return math.sqrt(max(float(sq), 0.0))


def mmd(X, Y, spec: KernelSpec) -> float:
    """Biased empirical MMD between two sets (self-pairs included).

    An unresolved sigma is fixed by the median heuristic over ``X ∪ Y``.
    """
    X = _as_matrix(X)
    Y = _as_matrix(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValidationError("mmd needs two non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise ValidationError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    spec = spec.resolve(np.vstack([X, Y]))
    sxx = gram(X, X, spec).sum()
    syy = gram(Y, Y, spec).sum()
    sxy = gram(X, Y, spec).sum()
    return _mmd_from_sums(sxx, syy, sxy, X.shape[0], Y.shape[0])


MEDIAN_MAX_POINTS = 2000


def median_heuristic_sigma(X, max_points: int = MEDIAN_MAX_POINTS) -> float:
    """Median pairwise Euclidean distance; 1.0 when that median is zero.

    Above ``max_points`` rows a fixed-seed subsample is used so the cost
    stays bounded.
    """
    X = _as_matrix(X)
    if X.shape[0] < 2:
        raise ValidationError("median heuristic needs at least 2 points")
    if X.shape[0] > max_points:
        X = X[np.sort(np.random.default_rng(0).choice(X.shape[0], max_points, replace=False))]
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


class MmdState:
    """Cached kernel sums for two multisets drawn from a fixed pool of vectors.

    Every pool element carries a multiplicity on the X side and on the Y
    side. ``row_x[p]`` / ``row_y[p]`` hold the kernel sum of pool element p
    against the current X / Y, so the distance after a hypothetical single
    move is an O(1) expression and committing it costs O(pool size).

    Row and total sums are accumulated in extended precision: when the two
    sets nearly coincide the squared distance is a small difference of
    O(1) sums, and float64 rounding alone would cost about 1e-9 relative.
    """

    def __init__(self, pool, spec: KernelSpec, count_x, count_y):
        self.pool = _as_matrix(pool)
        self.spec = spec.resolve(self.pool)
        self.K = gram(self.pool, self.pool, self.spec)
        self._diag = np.diag(self.K).copy()
        self.count_x = np.asarray(count_x, dtype=np.float64).copy()
        self.count_y = np.asarray(count_y, dtype=np.float64).copy()
        if self.count_x.shape != (len(self.pool),) or self.count_y.shape != (len(self.pool),):
            raise ValidationError("multiplicity vectors must match the pool size")
        if self.count_x.sum() < 1 or self.count_y.sum() < 1:
            raise ValidationError("both sides of an MMD state must be non-empty")
        self._Kext = self.K.astype(_EXT)
        self.row_x = self._Kext @ self.count_x.astype(_EXT)
        self.row_y = self._Kext @ self.count_y.astype(_EXT)
        self._refresh_sums()

    def _refresh_sums(self):
        self.n_t = int(round(self.count_x.sum()))
        self.n_n = int(round(self.count_y.sum()))
        cx, cy = self.count_x.astype(_EXT), self.count_y.astype(_EXT)
        self.sum_tt = cx @ self.row_x
        self.sum_nn = cy @ self.row_y
        self.sum_tn = cx @ self.row_y

    def distance(self) -> float:
        return _mmd_from_sums(self.sum_tt, self.sum_nn, self.sum_tn, self.n_t, self.n_n)

    def distance_after_move(self, p: int, to_y: bool = True) -> float:
        """Distance if one copy of pool element ``p`` switched sides (no mutation)."""
        kpp = _EXT(self._diag[p])
        if to_y:
            src_count, n_src, n_dst = self.count_x[p], self.n_t, self.n_n
        else:
            src_count, n_src, n_dst = self.count_y[p], self.n_n, self.n_t
        if src_count < 1:
            raise ValidationError(f"pool element {p} is not on the source side")
        if n_src < 2:
            raise ValidationError("a move may not empty a side")
        rx, ry = self.row_x[p], self.row_y[p]
        if to_y:
            sxx = self.sum_tt - 2.0 * rx + kpp
            syy = self.sum_nn + 2.0 * ry + kpp
            sxy = self.sum_tn + rx - ry - kpp
            return _mmd_from_sums(sxx, syy, sxy, n_src - 1, n_dst + 1)
        sxx = self.sum_tt + 2.0 * rx + kpp
        syy = self.sum_nn - 2.0 * ry + kpp
        sxy = self.sum_tn - rx + ry - kpp
        return _mmd_from_sums(sxx, syy, sxy, n_dst + 1, n_src - 1)

    def add_x(self, p: int):
        self.count_x[p] += 1
        self.row_x += self._Kext[:, p]
        self._refresh_sums()

    def remove_x(self, p: int):
        if self.count_x[p] < 1:
            raise ValidationError(f"pool element {p} is not in X")
        self.count_x[p] -= 1
        self.row_x -= self._Kext[:, p]
        self._refresh_sums()

    def add_y(self, p: int):
        self.count_y[p] += 1
        self.row_y += self._Kext[:, p]
        self._refresh_sums()

    def remove_y(self, p: int):
        if self.count_y[p] < 1:
            raise ValidationError(f"pool element {p} is not in Y")
        self.count_y[p] -= 1
        self.row_y -= self._Kext[:, p]
        self._refresh_sums()

    def move(self, p: int, to_y: bool = True):
        if to_y:
            self.remove_x(p)
            self.add_y(p)
        else:
            self.remove_y(p)
            self.add_x(p)

    def delta_move(self, p: int, to_y: bool = True) -> tuple[float, Callable[[], None]]:
        """Distance after moving ``p`` plus a handle that commits the move."""
        if not 0 <= p < len(self.pool):
            raise ValidationError(f"index {p} out of range")
        d_after = self.distance_after_move(p, to_y)
        return d_after, lambda: self.move(p, to_y)

    def members_x(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.pool)), self.count_x.astype(int))

    def members_y(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.pool)), self.count_y.astype(int))


def mmd_state_init(X, Y, spec: KernelSpec) -> MmdState:
    """State over ``X`` (pool indices ``0..|X|-1``) and ``Y`` (the indices after)."""
    X = _as_matrix(X)
    Y = _as_matrix(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValidationError("mmd state needs two non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise ValidationError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    nx, ny = X.shape[0], Y.shape[0]
    count_x = np.r_[np.ones(nx), np.zeros(ny)]
    count_y = np.r_[np.zeros(nx), np.ones(ny)]
    return MmdState(np.vstack([X, Y]), spec, count_x, count_y)


def mmd_state_delta_move(state: MmdState, idx: int) -> tuple[float, Callable[[], None]]:
    return state.delta_move(idx, to_y=True)
