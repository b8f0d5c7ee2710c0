import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distmatch.augment import (
    AugmentConfig,
    AugmentationSet,
    Transform,
    build_augmentations,
    d_A,
    d_A_matrix,
    estimate_sigma_delta,
    sample_views,
    transform_lipschitz,
)

IDENTITY_ONLY = AugmentationSet((Transform("identity"),))


def _toy_set():
    return AugmentationSet(
        (
            Transform("identity"),
            Transform("noise", {"offset": np.array([0.1, 0.0])}),
            Transform("scale", {"factor": np.array([0.5, 1.0])}),
        )
    )


def test_identity_must_come_first():
    with pytest.raises(ValueError):
        AugmentationSet((Transform("noise", {"offset": np.zeros(2)}),))


def test_identity_only_views_are_input():
    x = np.random.default_rng(0).random((5, 3))
    a, b = sample_views(IDENTITY_ONLY, x, np.random.default_rng(1))
    np.testing.assert_array_equal(a, x)
    np.testing.assert_array_equal(b, x)


def test_zero_noise_views_are_input():
    aug = build_augmentations(AugmentConfig(m=4, kinds=("noise",), noise_std=0.0), dim=3)
    x = np.random.default_rng(0).random((6, 3))
    a, b = sample_views(aug, x, np.random.default_rng(2))
    np.testing.assert_array_equal(a, x)
    np.testing.assert_array_equal(b, x)


def test_views_reproducible():
    aug = build_augmentations(AugmentConfig(m=6, seed=3), dim=4)
    x = np.random.default_rng(0).random((10, 4))
    first = sample_views(aug, x, np.random.default_rng(7))
    second = sample_views(aug, x, np.random.default_rng(7))
    for p, q in zip(first, second):
        assert p.tobytes() == q.tobytes()


def test_views_use_both_independent_indices():
    aug = build_augmentations(AugmentConfig(m=8, noise_std=0.1), dim=2)
    x = np.full((400, 2), 0.5)
    a, b = sample_views(aug, x, np.random.default_rng(0))
    assert np.mean(np.any(a != b, axis=1)) > 0.5
    # each view is one of the M fixed images of its row
    images = aug.views(x[:1])[0]
    for v in (a, b):
        assert all(np.any(np.all(np.isclose(images, row), axis=1)) for row in v)


def test_d_A_hand_minimum():
    aug = _toy_set()
    x1, x2 = np.array([0.2, 0.4]), np.array([0.5, 0.4])
    # views of x1: (0.2,.4) (0.3,.4) (0.1,.4); views of x2: (0.5,.4) (0.6,.4) (0.25,.4)
    v1 = [0.2, 0.3, 0.1]
    v2 = [0.5, 0.6, 0.25]
    hand = min(abs(a - b) for a, b in itertools.product(v1, v2))
    assert d_A(aug, x1, x2) == pytest.approx(hand, abs=1e-15)
    assert hand == pytest.approx(0.05)


def test_d_A_identity_only_is_euclidean():
    rng = np.random.default_rng(1)
    x1, x2 = rng.random(5), rng.random(5)
    assert d_A(IDENTITY_ONLY, x1, x2) == pytest.approx(np.linalg.norm(x1 - x2), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_d_A_symmetric_and_zero_on_diagonal(seed, m):
    aug = build_augmentations(AugmentConfig(m=m, kinds=("noise", "scale", "mask"), noise_std=0.05, seed=seed), dim=3)
    rng = np.random.default_rng(seed)
    x1, x2 = rng.random(3), rng.random(3)
    assert d_A(aug, x1, x2) == d_A(aug, x2, x1)
    assert d_A(aug, x1, x1) == 0.0
    D = d_A_matrix(aug, np.stack([x1, x2]))
    assert D[0, 1] == pytest.approx(d_A(aug, x1, x2), abs=1e-7)


def test_sigma_one_identity_only_is_class_diameter():
    rng = np.random.default_rng(0)
    pts = rng.random((12, 2))
    labels = np.array([1] * 6 + [2] * 6)
    rep = estimate_sigma_delta(IDENTITY_ONLY, pts, labels, [1.0])
    for k in (1, 2):
        cls = pts[labels == k]
        diam = max(np.linalg.norm(a - b) for a, b in itertools.combinations(cls, 2))
        assert rep.delta(k, 1.0) == pytest.approx(diam, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_delta_monotone_in_sigma(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((20, 2))
    labels = rng.integers(1, 3, size=20)
    labels[:2] = [1, 2]
    grid = [1.0, 0.9, 0.75, 0.5]
    rep = estimate_sigma_delta(_toy_set(), pts, labels, grid)
    for k in (1, 2):
        deltas = [rep.delta(k, s) for s in grid]
        assert all(b <= a for a, b in zip(deltas, deltas[1:]))


def test_greedy_against_subset_enumeration():
    # five tight points and one far outlier: greedy drops the outlier and one more
    pts = np.array([[0.1, 0.1], [0.12, 0.1], [0.1, 0.13], [0.14, 0.12], [0.11, 0.15], [0.9, 0.9]])
    labels = np.ones(6, dtype=int)
    rep = estimate_sigma_delta(IDENTITY_ONLY, pts, labels, [2 / 3])
    D = d_A_matrix(IDENTITY_ONLY, pts)
    best = min(max(D[i, j] for i, j in itertools.combinations(s, 2)) for s in itertools.combinations(range(6), 4))
    greedy = rep.delta(1, 2 / 3)
    assert greedy >= best - 1e-15
    assert greedy == pytest.approx(best, abs=1e-12)
    assert rep.masks[(1, 2 / 3)].sum() == 4 and not rep.masks[(1, 2 / 3)][5]


@pytest.mark.parametrize("seed", range(10))
def test_greedy_is_upper_bound(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((6, 2))
    rep = estimate_sigma_delta(_toy_set(), pts, np.ones(6, dtype=int), [2 / 3])
    D = d_A_matrix(_toy_set(), pts)
    best = min(max(D[i, j] for i, j in itertools.combinations(s, 2)) for s in itertools.combinations(range(6), 4))
    assert rep.delta(1, 2 / 3) >= best - 1e-12


def test_singleton_class_flagged(tmp_path):
    pts = np.random.default_rng(0).random((4, 2))
    rep = estimate_sigma_delta(IDENTITY_ONLY, pts, [1, 1, 1, 2], [1.0])
    row = [r for r in rep.rows if r["class"] == 2][0]
    assert row["delta"] == 0.0 and row["flag"] == "too-few"
    assert rep.coverage == "not-checked"
    rep.to_csv(tmp_path / "sd.csv")
    lines = (tmp_path / "sd.csv").read_text().splitlines()
    assert lines[0] == "class,sigma,delta,kept_count"
    assert len(lines) == 3


def test_image_transforms():
    shape = (3, 4, 4)
    img = np.random.default_rng(0).random((2, 48))
    flip = Transform("hflip", image_shape=shape)
    np.testing.assert_array_equal(flip(flip(img)), img)
    np.testing.assert_array_equal(flip(img).reshape(2, *shape)[..., 0], img.reshape(2, *shape)[..., -1])
    full = Transform("crop_resize", {"box": (0.0, 0.0, 4.0, 4.0), "flip": False}, image_shape=shape)
    np.testing.assert_allclose(full(img), img, atol=1e-15)
    # half-size crop of a horizontal ramp stays a ramp over the crop's range
    ramp = np.tile(np.arange(4.0), (3, 4, 1)).reshape(1, 48)
    half = Transform("crop_resize", {"box": (0.0, 1.0, 2.0, 2.0), "flip": False}, image_shape=shape)
    np.testing.assert_allclose(half(ramp).reshape(3, 4, 4)[0, 0], [1.0, 4 / 3, 5 / 3, 2.0])


def test_build_image_set():
    aug = build_augmentations(AugmentConfig(m=5, kinds=("crop_resize", "hflip"), image_shape=(3, 8, 8)), dim=192)
    x = np.random.default_rng(0).random((3, 192))
    V = aug.views(x)
    assert V.shape == (3, 5, 192)
    assert np.all((V >= 0) & (V <= 1))
    for t in aug.transforms[1:]:
        if t.kind == "crop_resize":
            top, left, h, w = t.params["box"]
            assert 0.2 * 64 - 1e-9 <= h * w <= 64 + 1e-9


def test_transform_lipschitz_finite():
    aug = build_augmentations(AugmentConfig(m=6, kinds=("noise", "scale", "mask")), dim=3)
    q = transform_lipschitz(aug, np.random.default_rng(0).random((50, 3)), np.random.default_rng(1))
    assert len(q) == 6 and q[0] == pytest.approx(1.0)
    assert all(np.isfinite(v) and v <= 1.1 + 1e-9 for v in q)
