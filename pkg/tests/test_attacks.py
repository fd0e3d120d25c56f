import numpy as np
import pytest

from diffmi.attacks import (
    ATTACKS,
    THREAT_MODELS,
    capability_table,
    check_capability,
    default_projection,
    infer_setting,
    prepare_diff,
    run_attack,
    run_incremental,
)
from diffmi.data import ProbeDataset, ProbeRecord
from diffmi.errors import CapabilityError, ValidationError


def _dataset(n, seed=0, prefix="t", classes=5, labels=True):
    rng = np.random.default_rng(seed)
    return ProbeDataset([
        ProbeRecord(f"{prefix}{i:03d}", tuple(rng.dirichlet(np.ones(classes) * (0.2 if i % 2 else 3.0))),
                    int(rng.integers(classes)) if labels else None, bool(i % 2))
        for i in range(n)
    ])


def test_capability_table_covers_every_pair():
    table = capability_table()
    assert len(table) == len(ATTACKS) * len(THREAT_MODELS)
    allowed = {(a, t) for a, t, ok in table if ok}
    assert ("label_only", "blind") not in allowed and ("label_only", "blackbox") in allowed
    assert ("loss_threshold", "graybox-blind") not in allowed
    assert all((a, t) in allowed for a in ("diff-w/", "diff-w/o", "1class") for t in THREAT_MODELS)


def test_capability_error_lists_allowed_settings():
    with pytest.raises(CapabilityError, match="true_labels") as exc:
        check_capability("label_only", "blind")
    assert "blackbox, graybox" in str(exc.value)
    with pytest.raises(ValidationError, match="unknown attack"):
        check_capability("svm", "blind")
    with pytest.raises(ValidationError, match="unknown threat model"):
        check_capability("nn", "whitebox")


def test_default_projection():
    assert (default_projection("blind", 10).kind, default_projection("blind", 10).k) == ("top_k", 3)
    assert default_projection("graybox", 10).kind == "top_k_plus_true"
    assert default_projection("blind", 2).k == 2


def test_infer_setting():
    assert infer_setting(_dataset(4)) == "blackbox"
    assert infer_setting(_dataset(4, labels=False)) == "blind"


def test_blind_strips_labels_and_membership():
    target, generated, cfg = prepare_diff("diff-w/", _dataset(30), "blind", _dataset(40, 1, "g"))
    assert not target.has_true_labels and all(r.is_member is None for r in target)
    assert len(generated) == cfg.batch_size == 20
    assert cfg.projection.kind == "top_k"


def test_labeled_setting_requires_labels():
    with pytest.raises(CapabilityError, match="no true labels"):
        run_attack("label_only", _dataset(10, labels=False), "blackbox")


def test_run_attack_results():
    target, gen = _dataset(60), _dataset(20, 1, "g")
    for name in ("diff-w/", "diff-w/o", "1class"):
        res = run_attack(name, target, "blind", generated=gen)
        assert [p.id for p in res.predictions] == target.ids
        assert (res.run is None) == (name == "1class")
    ref = _dataset(50, 2, "r")
    assert len(run_attack("top1_threshold", target, "blind", reference=ref).predictions) == 60
    assert len(run_attack("label_only", target, "blackbox").predictions) == 60


def test_run_attack_missing_inputs():
    target = _dataset(30)
    with pytest.raises(ValidationError, match="generated nonmember"):
        run_attack("diff-w/", target, "blind")
    with pytest.raises(ValidationError, match="reference probes"):
        run_attack("top1_threshold", target, "blind")
    with pytest.raises(ValidationError, match="shadow"):
        run_attack("nn", target, "blind")
    with pytest.raises(CapabilityError):
        run_attack("loss_threshold", target, "blind")


def test_run_incremental():
    target, gen = _dataset(45), _dataset(20, 1, "g")
    batch = {p.id: p.predicted_member for p in run_attack("diff-w/", target, "blind", generated=gen).predictions}
    for rid in target.ids[::5]:
        assert run_incremental("diff-w/", rid, target, "blind", generated=gen).predicted_member == batch[rid]
    with pytest.raises(ValidationError, match="not in the target"):
        run_incremental("diff-w/", "zzz", target, "blind", generated=gen)
    with pytest.raises(ValidationError, match="incremental"):
        run_incremental("1class", target.ids[0], target, "blind", generated=gen)
