import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffmi.data import ProbeDataset, ProbeRecord
from diffmi.errors import NumericalError, ValidationError
from diffmi.nonmember import NoiseSpec, SeparationSpec, generate_random, perturb_random, rough_separation, transform_sample
from diffmi.projection import ProjectionSpec


@pytest.mark.parametrize("op", ["laplace", "sobel", "scharr"])
def test_constant_grid_gives_zero(op):
    assert np.array_equal(transform_sample(np.full((4, 5), 0.6), op), np.zeros((4, 5)))


def test_sobel_vertical_step():
    img = np.array([[0.0, 0.0, 1.0]] * 3)
    # Gx at the centre: (1 + 2 + 1) * 1 = 4 before clipping
    assert transform_sample(img, "sobel")[1, 1] == 1.0


def test_laplace_bright_centre():
    img = np.zeros((3, 3))
    img[1, 1] = 0.5
    out = transform_sample(img, "laplace")
    assert out[1, 1] == 0.0  # -4 * 0.5 clipped
    assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 0.5


def test_transform_errors():
    with pytest.raises(ValidationError):
        transform_sample(np.zeros((2, 5)), "sobel")
    with pytest.raises(ValidationError):
        transform_sample(np.zeros((3, 3)), "canny")


def test_perturb():
    x = np.random.default_rng(0).random(50)
    out = perturb_random(x, NoiseSpec("gaussian", variance=1e-20), seed=1)
    assert np.allclose(out, x, atol=1e-9)
    a = perturb_random(x, NoiseSpec("gaussian", variance=0.001), seed=3)
    assert np.array_equal(a, perturb_random(x, NoiseSpec("gaussian", variance=0.001), seed=3))
    sp = perturb_random(x, NoiseSpec("salt_pepper", rate=1.0), seed=2)
    assert set(np.unique(sp)) <= {0.0, 1.0}
    wide = perturb_random(x, NoiseSpec("gaussian", variance=4.0), seed=4)
    assert wide.min() >= 0 and wide.max() <= 1
    assert perturb_random(x, NoiseSpec("gaussian", variance=4.0), seed=4, clip=False).max() > 1


@pytest.mark.parametrize("kw", [{"variance": 0.0}, {"kind": "salt_pepper", "rate": 0.0}, {"kind": "speckle"}])
def test_noise_validation(kw):
    with pytest.raises(ValidationError):
        NoiseSpec(**kw)


def test_generate_random():
    assert np.array_equal(generate_random(4, 7).features, generate_random(4, 7).features)
    draws = np.vstack([generate_random(10, s).features for s in range(1000)])
    assert draws.min() >= 0 and draws.max() <= 1
    assert abs(draws.mean() - 0.5) < 0.01
    assert generate_random((3, 3), 0).features.shape == (3, 3)
    with pytest.raises(ValidationError):
        generate_random(0, 0)


def _ds(top1s):
    recs = []
    for i, t in enumerate(top1s):
        recs.append(ProbeRecord(f"r{i}", (t, (1 - t) / 2, (1 - t) / 2)))
    return ProbeDataset(recs)


def test_threshold_separation():
    non, tgt = rough_separation(_ds([0.99, 0.98, 0.51, 0.50]), SeparationSpec(threshold_count=2), ProjectionSpec())
    assert sorted(non) == ["r2", "r3"] and sorted(tgt) == ["r0", "r1"]


@pytest.mark.parametrize("method", ["kmeans", "agglomerative"])
def test_cluster_separation_recovers_blobs(method):
    rng = np.random.default_rng(0)
    top1 = np.r_[rng.uniform(0.9, 0.95, 10), rng.uniform(0.35, 0.4, 10)]
    non, tgt = rough_separation(_ds(top1), SeparationSpec(method), ProjectionSpec())
    assert sorted(tgt) == sorted(f"r{i}" for i in range(10))
    assert sorted(non) == sorted(f"r{i}" for i in range(10, 20))


@pytest.mark.parametrize("method", ["kmeans", "agglomerative"])
def test_identical_records_are_degenerate(method):
    with pytest.raises(NumericalError):
        rough_separation(_ds([0.6] * 8), SeparationSpec(method), ProjectionSpec())


def test_separation_errors():
    with pytest.raises(ValidationError):
        rough_separation(_ds([0.6, 0.7]), SeparationSpec(threshold_count=2), ProjectionSpec())
    with pytest.raises(ValidationError):
        rough_separation(_ds([0.6, 0.7, 0.8]), SeparationSpec("kmeans"), ProjectionSpec())
    with pytest.raises(ValidationError):
        SeparationSpec("dbscan")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.34, 1.0), min_size=5, max_size=30), st.sampled_from(["threshold", "kmeans"]))
def test_separation_partitions(top1s, method):
    ds = _ds(top1s)
    try:
        non, tgt = rough_separation(ds, SeparationSpec(method), ProjectionSpec())
    except NumericalError:
        return
    assert sorted(non + tgt) == sorted(ds.ids) and not set(non) & set(tgt)
    assert non and tgt


@pytest.mark.parametrize("op", ["laplace", "sobel", "scharr"])
def test_operators_match_ndimage(op):
    from scipy import ndimage

    sx = {"sobel": [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], "scharr": [[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]]}
    img = np.random.default_rng(1).random((7, 9)) * 0.2
    if op == "laplace":
        ref = ndimage.correlate(img, np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], float), mode="nearest")
    else:
        k = np.array(sx[op], float)
        ref = np.hypot(ndimage.correlate(img, k, mode="nearest"), ndimage.correlate(img, k.T, mode="nearest"))
    assert np.allclose(transform_sample(img, op), np.clip(ref, 0, 1), atol=1e-12)
