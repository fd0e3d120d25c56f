import numpy as np
import pytest

from diffmi.data import AttackConfig, ProbeDataset, ProbeRecord
from diffmi.errors import NumericalError, ValidationError
from diffmi.kernels import KernelSpec
from diffmi.oneclass import classify_one_class, load_model, oneclass_attack, save_model, train_one_class


def _cluster(n=200, spread=0.01, seed=0):
    return np.array([0.5, 0.3, 0.2]) + spread * np.random.default_rng(seed).standard_normal((n, 3))


def test_nu_bounds_training_outliers():
    X = _cluster()
    model = train_one_class(X, KernelSpec(sigma=0.02), nu=0.1)
    assert np.mean(model.decision(X) < 0) <= 0.15


def test_nu_property_against_support_fraction():
    X = _cluster(300, seed=1)
    model = train_one_class(X, KernelSpec(sigma=0.02), nu=0.2)
    assert np.mean(model.decision(X) < -1e-6) <= 0.2 + 1e-9
    assert len(model.support_vectors) >= 0.2 * len(X) - 1


def test_centroid_scores_above_far_point():
    X = _cluster()
    model = train_one_class(X, KernelSpec(sigma=0.02), nu=0.1)
    centroid, far = X.mean(axis=0), X.mean(axis=0) + 0.1
    assert model.decision(centroid)[0] >= model.decision(far)[0]


def test_all_identical_training_set_is_all_inlier():
    model = train_one_class(np.tile([0.4, 0.3, 0.3], (20, 1)), KernelSpec(sigma=0.1), nu=0.1)
    preds = classify_one_class(model, [[0.4, 0.3, 0.3]], ["x"])
    assert preds[0].predicted_member is False


def test_outlier_is_member_and_inlier_is_not():
    X = _cluster()
    model = train_one_class(X, KernelSpec(sigma=0.02), nu=0.1)
    inlier = X[np.argmax(model.decision(X))]
    preds = classify_one_class(model, [[0.98, 0.01, 0.01], inlier], ["out", "in"])
    assert [p.predicted_member for p in preds] == [True, False]


def test_matches_libsvm_decisions():
    svm = pytest.importorskip("sklearn.svm")
    rng = np.random.default_rng(2)
    X = rng.dirichlet(np.ones(3) * 4, 150)
    Q = rng.dirichlet(np.ones(3), 200)
    sigma = 0.15
    ours = train_one_class(X, KernelSpec(sigma=sigma), nu=0.1, tol=1e-8)
    ref = svm.OneClassSVM(kernel="rbf", gamma=1 / (2 * sigma**2), nu=0.1, tol=1e-8).fit(X)
    # libsvm scales the dual by nu * n; decisions agree up to that factor
    scale = 0.1 * len(X)
    assert np.allclose(ours.decision(Q) * scale, ref.decision_function(Q), atol=1e-4)


def test_training_errors_and_cap():
    with pytest.raises(ValidationError):
        train_one_class(_cluster(5), KernelSpec(sigma=0.1))
    with pytest.raises(ValidationError):
        train_one_class(_cluster(), KernelSpec(sigma=0.1), nu=1.5)
    with pytest.raises(NumericalError, match="pair updates"):
        train_one_class(_cluster(), KernelSpec(sigma=0.02), nu=0.3, max_updates=1)


def test_model_round_trip(tmp_path):
    model = train_one_class(_cluster(), KernelSpec(sigma=0.02), nu=0.1)
    save_model(model, tmp_path / "m.json")
    loaded = load_model(tmp_path / "m.json")
    Q = _cluster(10, seed=4)
    assert np.allclose(loaded.decision(Q), model.decision(Q))
    with pytest.raises(ValidationError, match="dimension"):
        model.decision([[0.5, 0.5]])


def test_attack_bookkeeping():
    rng = np.random.default_rng(3)
    target = ProbeDataset([ProbeRecord(f"t{i}", tuple(rng.dirichlet(np.ones(4)))) for i in range(1000)])
    nonmem = ProbeDataset([ProbeRecord(f"g{i}", tuple(rng.dirichlet(np.ones(4) * 5))) for i in range(100)])
    preds = oneclass_attack(target, nonmem, AttackConfig.for_variant("1class"))
    assert [p.id for p in preds] == target.ids and {p.variant for p in preds} == {"1class"}
