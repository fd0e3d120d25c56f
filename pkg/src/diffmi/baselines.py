"""Prior membership inference attacks used as comparison points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from diffmi.data import MembershipPrediction, ProbeDataset
from diffmi.errors import CapabilityError, ValidationError
from diffmi.projection import ProjectionSpec, project_many
from diffmi.toy import ToyModel, cross_entropy, train_model

LOSS_FLOOR = 1e-12
DEFAULT_PERCENTILE = 90.0
NN_EPOCHS = 200
NN_LR = 0.01
MIN_SHADOW_SET = 50

NN_FEATURES = {
    "nn": ProjectionSpec("sorted_all"),
    "top3_nn": ProjectionSpec("top_k", 3),
    "top2_plus_true": ProjectionSpec("top_k_plus_true", 3),
}


@dataclass(frozen=True)
class ShadowArtifacts:
    """What an attacker learns from a shadow model it trained itself."""

    model: Optional[ToyModel]
    member_outputs: ProbeDataset
    nonmember_outputs: ProbeDataset
    avg_train_loss: float

    def __post_init__(self):
        overlap = set(self.member_outputs.ids) & set(self.nonmember_outputs.ids)
        if overlap:
            raise ValidationError(f"shadow member and nonmember outputs share ids, e.g. {sorted(overlap)[0]!r}")


def _require_labels(target: ProbeDataset, attack: str):
    if not target.has_true_labels:
        raise CapabilityError(f"{attack} needs the ground-truth label of every target record (blackbox or graybox setting)")


def _preds(ids, flags, variant) -> list[MembershipPrediction]:
    return [MembershipPrediction(i, bool(f), variant) for i, f in zip(ids, flags)]


def top1_threshold_attack(target: ProbeDataset, reference_probes: ProbeDataset,
                          percentile: float = DEFAULT_PERCENTILE) -> list[MembershipPrediction]:
    """Member iff the top-1 score beats a percentile of generated-sample top-1 scores."""
    if len(reference_probes) == 0:
        raise ValidationError("top1 threshold needs a non-empty reference probe set")
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must lie in (0, 100], got {percentile}")
    target = target.blind()
    threshold = float(np.percentile(reference_probes.probs_matrix().max(axis=1), percentile))
    top1 = target.probs_matrix().max(axis=1)
    return _preds(target.ids, top1 > threshold, "top1_threshold")


def true_class_loss(p_true: float) -> float:
    return -math.log(max(p_true, LOSS_FLOOR))


def loss_threshold_attack(target: ProbeDataset, shadow: ShadowArtifacts) -> list[MembershipPrediction]:
    """Member iff the cross-entropy on the true class is below the shadow's mean training loss."""
    _require_labels(target, "loss_threshold")
    target = target.blind()
    flags = [true_class_loss(r.probs[r.true_label]) < shadow.avg_train_loss for r in target]
    return _preds(target.ids, flags, "loss_threshold")


def label_only_attack(target: ProbeDataset) -> list[MembershipPrediction]:
    """Member iff the predicted class (lowest index on ties) equals the true label."""
    _require_labels(target, "label_only")
    target = target.blind()
    flags = [int(np.argmax(r.probs)) == r.true_label for r in target]
    return _preds(target.ids, flags, "label_only")


def _features(ds: ProbeDataset, spec: ProjectionSpec) -> np.ndarray:
    labels = ds.true_labels() if spec.needs_true_label else None
    return project_many(ds.probs_matrix(), labels, spec)


def train_attack_classifier(shadow: ShadowArtifacts, spec: ProjectionSpec, seed: int = 0,
                            epochs: int = NN_EPOCHS, lr: float = NN_LR) -> ToyModel:
    if len(shadow.member_outputs) < MIN_SHADOW_SET or len(shadow.nonmember_outputs) < MIN_SHADOW_SET:
        raise ValidationError(f"NN attacks need at least {MIN_SHADOW_SET} shadow members and nonmembers")
    if spec.needs_true_label and not (
        shadow.member_outputs.has_true_labels and shadow.nonmember_outputs.has_true_labels
    ):
        raise CapabilityError("top2_plus_true needs true labels on the shadow outputs")
    X = np.vstack([_features(shadow.member_outputs, spec), _features(shadow.nonmember_outputs, spec)])
    y = np.r_[np.ones(len(shadow.member_outputs), dtype=np.int64), np.zeros(len(shadow.nonmember_outputs), dtype=np.int64)]
    return train_model(X, y, "mlp", epochs=epochs, lr=lr, seed=seed, num_classes=2)


def nn_attack(target: ProbeDataset, shadow: ShadowArtifacts, feature_spec: str = "nn", seed: int = 0,
              epochs: int = NN_EPOCHS, lr: float = NN_LR) -> list[MembershipPrediction]:
    """Shadow-trained binary classifier over projected output vectors.

    ``feature_spec`` picks the input: ``nn`` (all scores, sorted),
    ``top3_nn`` (top three) or ``top2_plus_true`` (top two plus the
    true-class score). Member iff the classifier's member probability > 0.5.
    """
    if feature_spec not in NN_FEATURES:
        raise ValidationError(f"unknown NN feature set {feature_spec!r}; expected one of {sorted(NN_FEATURES)}")
    spec = NN_FEATURES[feature_spec]
    if spec.kind != "sorted_all" and spec.k > target.num_classes:
        spec = ProjectionSpec(spec.kind, target.num_classes)
    if spec.needs_true_label:
        _require_labels(target, feature_spec)
    target = target.blind()
    clf = train_attack_classifier(shadow, spec, seed, epochs, lr)
    score = clf.predict(_features(target, spec))[:, 1]
    return _preds(target.ids, score > 0.5, feature_spec)


def build_shadow(model: ToyModel, member_x, member_y, nonmember_x, nonmember_y) -> ShadowArtifacts:
    """Probe a trained shadow model on its own training and held-out data."""
    from diffmi.toy import predict_proba

    mem = predict_proba(model, member_x, labels=member_y, prefix="shadow_in_")
    non = predict_proba(model, nonmember_x, labels=nonmember_y, prefix="shadow_out_")
    avg_loss = cross_entropy(model.logits(np.asarray(member_x, dtype=np.float64)), np.asarray(member_y))
    return ShadowArtifacts(model, mem, non, avg_loss)
