"""Attack registry and threat-model capability checks.

Every attack declares what the adversary must hold. A threat model grants
a set of capabilities; running an attack under a model that lacks one of
its requirements raises ``CapabilityError`` before any work is done.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from diffmi import baselines
from diffmi.data import AttackConfig, MembershipPrediction, ProbeDataset
from diffmi.diff import BatchedRun, attack_incremental, resolve_attack_kernel, run_batches, split_batches
from diffmi.errors import CapabilityError, ValidationError
from diffmi.kernels import KernelSpec
from diffmi.nonmember import SeparationSpec
from diffmi.oneclass import DEFAULT_NU, oneclass_attack
from diffmi.projection import ProjectionSpec

# capability names
LABELS = "true_labels"
SHADOW = "shadow_model"
GENERATED = "generated_nonmembers"
REFERENCE = "reference_probes"

THREAT_MODELS = {
    "blind": frozenset({SHADOW, GENERATED, REFERENCE}),
    "graybox-blind": frozenset({SHADOW, GENERATED, REFERENCE}),
    "blackbox": frozenset({LABELS, SHADOW, GENERATED, REFERENCE}),
    "graybox": frozenset({LABELS, SHADOW, GENERATED, REFERENCE}),
}
LABELED_SETTINGS = ("blackbox", "graybox")


@dataclass(frozen=True)
class AttackInfo:
    name: str
    requires: frozenset = field(default_factory=frozenset)
    probe_budget: str = "target set"


ATTACKS = {
    "diff-w/": AttackInfo("diff-w/", frozenset({GENERATED}), "target set + 20 samples"),
    "diff-w/o": AttackInfo("diff-w/o", frozenset(), "target set"),
    "1class": AttackInfo("1class", frozenset({GENERATED}), "target set + 1,000 samples"),
    "nn": AttackInfo("nn", frozenset({SHADOW})),
    "top3_nn": AttackInfo("top3_nn", frozenset({SHADOW})),
    "top1_threshold": AttackInfo("top1_threshold", frozenset({REFERENCE}), "target set + 1,000 samples"),
    "loss_threshold": AttackInfo("loss_threshold", frozenset({LABELS, SHADOW})),
    "label_only": AttackInfo("label_only", frozenset({LABELS})),
    "top2_plus_true": AttackInfo("top2_plus_true", frozenset({LABELS, SHADOW})),
}
DIFF_VARIANTS = ("diff-w/", "diff-w/o", "1class")


def capability_table() -> list[tuple[str, str, bool]]:
    """``(attack, threat model, allowed)`` for every pair."""
    return [(a, t, info.requires <= caps) for a, info in ATTACKS.items() for t, caps in THREAT_MODELS.items()]


def check_capability(attack: str, setting: str) -> AttackInfo:
    if attack not in ATTACKS:
        raise ValidationError(f"unknown attack {attack!r}; expected one of {sorted(ATTACKS)}")
    if setting not in THREAT_MODELS:
        raise ValidationError(f"unknown threat model {setting!r}; expected one of {sorted(THREAT_MODELS)}")
    info = ATTACKS[attack]
    missing = sorted(info.requires - THREAT_MODELS[setting])
    if missing:
        allowed = [t for t, caps in THREAT_MODELS.items() if info.requires <= caps]
        raise CapabilityError(
            f"{attack} requires {', '.join(missing)}, which the {setting} threat model does not grant; "
            f"it runs only under: {', '.join(allowed)}"
        )
    return info


def default_projection(setting: str, num_classes: int = 3) -> ProjectionSpec:
    """Top three scores when labels are hidden; top two plus the true class otherwise.

    ``k`` shrinks to the class count for models with fewer than three classes.
    """
    k = min(3, num_classes)
    if setting in LABELED_SETTINGS:
        return ProjectionSpec("top_k_plus_true", k)
    return ProjectionSpec("top_k", k)


def infer_setting(target: ProbeDataset) -> str:
    return "blackbox" if target.has_true_labels else "blind"


@dataclass
class AttackResult:
    predictions: list[MembershipPrediction]
    run: Optional[BatchedRun] = None


def _attacker_view(target, generated, setting):
    target = target.blind()
    if LABELS not in THREAT_MODELS[setting]:
        target = target.without_labels()
        generated = generated.without_labels() if generated is not None else None
    elif not target.has_true_labels:
        raise CapabilityError(f"{setting} setting declared but the target records carry no true labels")
    return target, generated


def prepare_diff(name, target, setting, generated=None, kernel=None, projection=None, batch_size=None):
    """Attacker view of the inputs plus the variant's ``AttackConfig``."""
    check_capability(name, setting)
    if name not in DIFF_VARIANTS:
        raise ValidationError(f"{name} is not one of the differential/one-class variants {DIFF_VARIANTS}")
    target, generated = _attacker_view(target, generated, setting)
    projection = projection or default_projection(setting, target.num_classes)
    extra = {} if batch_size is None else {"batch_size": batch_size}
    config = AttackConfig.for_variant(name, projection=projection, kernel=kernel or KernelSpec(), **extra)
    if name in ("diff-w/", "1class"):
        _need(generated, name, "a generated nonmember set")
    if name == "diff-w/" and len(generated) > config.batch_size:
        # the nonmember side is sized to the batch
        generated = generated.subset(generated.ids[: config.batch_size])
    return target, generated, config


def run_attack(
    name: str,
    target: ProbeDataset,
    setting: Optional[str] = None,
    generated: Optional[ProbeDataset] = None,
    reference: Optional[ProbeDataset] = None,
    shadow: Optional[baselines.ShadowArtifacts] = None,
    kernel: Optional[KernelSpec] = None,
    projection: Optional[ProjectionSpec] = None,
    separation: Optional[SeparationSpec] = None,
    batch_size: Optional[int] = None,
    nu: float = DEFAULT_NU,
    percentile: float = baselines.DEFAULT_PERCENTILE,
    seed: int = 0,
    jobs: int = 1,
) -> AttackResult:
    """Run one registered attack on ``target`` under a threat model.

    Under label-free settings the true labels are stripped from every
    input before the attack sees them. Ground-truth membership is always
    stripped.
    """
    setting = setting or infer_setting(target)
    check_capability(name, setting)
    if name in DIFF_VARIANTS:
        target, generated, config = prepare_diff(name, target, setting, generated, kernel, projection, batch_size)
        if name == "1class":
            return AttackResult(oneclass_attack(target, generated, config, nu))
        run = run_batches(target, generated, config, separation, jobs)
        return AttackResult(run.predictions, run)

    target, _ = _attacker_view(target, None, setting)
    if name == "top1_threshold":
        _need(reference, name, "reference probes")
        return AttackResult(baselines.top1_threshold_attack(target, reference, percentile))
    if name == "label_only":
        return AttackResult(baselines.label_only_attack(target))
    _need(shadow, name, "shadow artifacts")
    if name == "loss_threshold":
        return AttackResult(baselines.loss_threshold_attack(target, shadow))
    return AttackResult(baselines.nn_attack(target, shadow, name, seed=seed))


def run_incremental(
    name: str,
    record_id: str,
    target: ProbeDataset,
    setting: Optional[str] = None,
    generated: Optional[ProbeDataset] = None,
    kernel: Optional[KernelSpec] = None,
    projection: Optional[ProjectionSpec] = None,
    separation: Optional[SeparationSpec] = None,
    batch_size: Optional[int] = None,
) -> MembershipPrediction:
    """Verdict for one record, given the rest of the batch it falls into.

    The batch is the one batch mode would assign the record to, and the
    kernel bandwidth is fixed over the whole target set, so the verdict
    matches the batch-mode verdict.
    """
    setting = setting or infer_setting(target)
    if name not in ("diff-w/", "diff-w/o"):
        raise ValidationError(f"incremental mode applies to diff-w/ and diff-w/o, not {name!r}")
    if record_id not in target.ids:
        raise ValidationError(f"record {record_id!r} is not in the target set")
    target, generated, config = prepare_diff(name, target, setting, generated, kernel, projection, batch_size)
    config = resolve_attack_kernel(target, generated, config)
    pos = target.ids.index(record_id)
    for start, stop in split_batches(len(target), config.batch_size):
        if start <= pos < stop:
            break
    rest = [i for i in target.ids[start:stop] if i != record_id]
    previous = target.subset(rest)
    return attack_incremental(record_id, previous, target, generated, config, separation)


def _need(obj, attack: str, what: str):
    if obj is None or (isinstance(obj, ProbeDataset) and len(obj) == 0):
        raise ValidationError(f"{attack} needs {what}")
