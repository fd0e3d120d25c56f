"""One-class attack: learn the nonmember class, flag outliers as members."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from diffmi.data import AttackConfig, MembershipPrediction, ProbeDataset
from diffmi.errors import NumericalError, UpstreamFileError, ValidationError
from diffmi.kernels import KernelSpec, gram
from diffmi.projection import project_many

DEFAULT_NU = 0.005
KKT_TOL = 1e-4
MAX_PAIR_UPDATES = 100_000


@dataclass(frozen=True)
class OneClassModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    rho: float
    kernel: KernelSpec
    nu: float
    pair_updates: int = 0

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.support_vectors.shape[1]:
            raise ValidationError(
                f"dimension mismatch: model expects {self.support_vectors.shape[1]}, got {X.shape[1]}"
            )
        return gram(X, self.support_vectors, self.kernel) @ self.dual_coef - self.rho

    def to_dict(self) -> dict:
        return {
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "rho": self.rho,
            "kernel": self.kernel.to_dict(),
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OneClassModel":
        return cls(
            np.asarray(d["support_vectors"], dtype=np.float64),
            np.asarray(d["dual_coef"], dtype=np.float64),
            float(d["rho"]),
            KernelSpec.from_dict(d["kernel"]),
            float(d["nu"]),
        )


def save_model(model: OneClassModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_model(path) -> OneClassModel:
    path = Path(path)
    if not path.is_file():
        raise UpstreamFileError(f"{path}: no such file")
    return OneClassModel.from_dict(json.loads(path.read_text(encoding="utf-8")))


def train_one_class(X, kernel: Optional[KernelSpec] = None, nu: float = DEFAULT_NU,
                    tol: float = KKT_TOL, max_updates: int = MAX_PAIR_UPDATES) -> OneClassModel:
    """Nu-one-class SVM fitted by pairwise coordinate descent on the dual.

    Minimises ``a^T K a / 2`` subject to ``0 <= a_i <= 1/(nu n)`` and
    ``sum(a) = 1``. Each step picks the maximal KKT-violating pair (largest
    gradient among ``a_i > 0``, smallest among ``a_j < C``) and solves the
    two-variable subproblem exactly; stops once the gap is below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"training set must be (n, k), got shape {X.shape}")
    n = len(X)
    if n < 10:
        raise ValidationError(f"one-class training needs at least 10 vectors, got {n}")
    if not 0 < nu < 1:
        raise ValidationError(f"nu must lie in (0, 1), got {nu}")
    kernel = (kernel or KernelSpec()).resolve(X)
    K = gram(X, X, kernel)
    C = 1.0 / (nu * n)

    alpha = np.zeros(n)
    full = int(np.floor(nu * n))
    alpha[:full] = C
    if full < n:
        alpha[full] = 1.0 - full * C
    grad = K @ alpha

    updates = 0
    while True:
        up = alpha < C - 1e-15
        down = alpha > 1e-15
        i = np.flatnonzero(down)[np.argmax(grad[down])]
        j = np.flatnonzero(up)[np.argmin(grad[up])]
        if grad[i] - grad[j] < tol:
            break
        if updates >= max_updates:
            raise NumericalError(
                f"one-class solver did not reach KKT gap {tol} within {max_updates} pair updates "
                f"(gap {grad[i] - grad[j]:.3g})"
            )
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        step = (grad[i] - grad[j]) / max(eta, 1e-12)
        step = min(step, alpha[i], C - alpha[j])
        alpha[i] -= step
        alpha[j] += step
        grad += step * (K[:, j] - K[:, i])
        updates += 1

    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if free.any():
        rho = float(grad[free].mean())
    else:
        at_upper = alpha >= C - 1e-12
        at_lower = alpha <= 1e-12
        lo = grad[at_upper].max() if at_upper.any() else grad.min()
        hi = grad[at_lower].min() if at_lower.any() else grad.max()
        rho = float((lo + hi) / 2.0)
    sv = alpha > 1e-12
    return OneClassModel(X[sv].copy(), alpha[sv].copy(), rho, kernel, nu, updates)


def classify_one_class(model: OneClassModel, target_projected, ids=None, variant: str = "1class") -> list[MembershipPrediction]:
    """Member iff the target lies outside the learned nonmember region (decision < 0)."""
    X = np.atleast_2d(np.asarray(target_projected, dtype=np.float64))
    ids = list(range(len(X))) if ids is None else list(ids)
    if len(ids) != len(X):
        raise ValidationError(f"{len(ids)} ids for {len(X)} vectors")
    scores = model.decision(X)
    return [
        MembershipPrediction(i, bool(s < 0), variant, {"decision": float(s)})
        for i, s in zip(ids, scores)
    ]


def oneclass_attack(target: ProbeDataset, nonmem: ProbeDataset, config: AttackConfig,
                    nu: float = DEFAULT_NU) -> list[MembershipPrediction]:
    target = target.blind()
    nonmem = nonmem.blind()
    need = config.projection.needs_true_label
    train = project_many(nonmem.probs_matrix(), nonmem.true_labels() if need else None, config.projection)
    feats = project_many(target.probs_matrix(), target.true_labels() if need else None, config.projection)
    # bandwidth from the pooled projections, as in the differential attacks
    kernel = config.kernel.resolve(np.vstack([train, feats])) if config.kernel.needs_sigma else config.kernel
    model = train_one_class(train, kernel, nu)
    return classify_one_class(model, feats, target.ids)
