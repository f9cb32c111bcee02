import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sss.augment import (StrongConfig, WeakConfig, augment_pair, box_mask, color_jitter,
                         complementary_dropout, complementary_masks, cutmix_box, gaussian_blur,
                         grayscale, hflip, sample_geometry, strong_augment, weak_augment)


def test_weak_geometry_replays_on_labels():
    rng = np.random.default_rng(0)
    img = np.zeros((2, 32, 32), np.float32)
    lab = np.zeros((2, 32, 32), np.uint8)
    img[:, 10:20, 5:12] = 1.0
    lab[:, 10:20, 5:12] = 1
    for _ in range(30):
        out, geom = weak_augment(img, rng)
        lab_out = geom.apply(lab, order=0)
        assert out.shape == img.shape and lab_out.shape == lab.shape
        assert set(np.unique(lab_out)) <= {0, 1}
        # nearest-neighbour labels sit where the interpolated image is bright
        if lab_out.any():
            assert out[lab_out == 1].mean() > 0.5


def test_scale_range_and_crop():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = sample_geometry((40, 40), rng)
        assert 0.5 <= g.scale <= 2.0
    g = sample_geometry((40, 40), rng, WeakConfig(crop_size=16))
    assert g.out_size == (16, 16)
    with pytest.raises(ValueError):
        g.apply(np.zeros((20, 20)))


def test_identity_geometry():
    rng = np.random.default_rng(2)
    img = rng.random((3, 16, 16))
    out, geom = weak_augment(img, rng, WeakConfig(scale_range=(1.0, 1.0), flip_prob=0.0))
    np.testing.assert_array_equal(out, img)
    out, _ = weak_augment(img, rng, WeakConfig(scale_range=(1.0, 1.0), flip_prob=1.0))
    np.testing.assert_array_equal(out, hflip(img))


def test_photometric_ops():
    x = np.linspace(0, 1, 64).reshape(8, 8)
    assert np.array_equal(grayscale(x), x)
    np.testing.assert_allclose(color_jitter(x, 0.0, 1.0, 1.0), x)
    j = color_jitter(x, 0.2, 1.3, 0.8)
    assert j.min() >= 0 and j.max() <= 1
    b = gaussian_blur(x, 1.0)
    assert b.shape == x.shape and b.std() < x.std()


def test_cutmix_box_area_bounds():
    rng = np.random.default_rng(3)
    cfg = StrongConfig()
    for _ in range(200):
        m = cutmix_box((32, 32), rng, cfg.cutmix_area, cfg.cutmix_aspect)
        assert 0 < (~m).sum() <= 32 * 32
    m = box_mask((6, 6), 1, 2, 2, 3)
    assert (~m).sum() == 6 and not m[1, 2] and m[0, 0]


def test_strong_augment_provenance():
    rng = np.random.default_rng(4)
    img = np.full((16, 16), 0.2, np.float32)
    peer = np.full((16, 16), 0.9, np.float32)
    cfg = StrongConfig(jitter_prob=0, gray_prob=0, blur_prob=0, cutmix_prob=1.0)
    out, mix = strong_augment(img, rng, peer, cfg)
    np.testing.assert_array_equal(out[~mix], peer[~mix])
    np.testing.assert_array_equal(out[mix], img[mix])
    with pytest.raises(ValueError):
        strong_augment(img, rng, np.zeros((8, 8)), cfg)


def test_two_strong_views_differ():
    rng = np.random.default_rng(5)
    x = rng.random((16, 16)).astype(np.float32)
    pair = augment_pair(x, rng, rng.random((16, 16)).astype(np.float32))
    assert pair.x_s1.shape == pair.x_s2.shape == x.shape
    assert not np.array_equal(pair.x_s1, pair.x_s2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.floats(0.0, 0.5), st.integers(0, 2**31 - 1))
def test_complementary_masks_disjoint_and_rescaled(b, c, p, seed):
    m1, m2 = complementary_masks(b, c, p, np.random.default_rng(seed))
    dropped1, dropped2 = m1 == 0, m2 == 0
    assert not np.any(dropped1 & dropped2)
    for m in (m1, m2):
        kept = (m > 0).sum(axis=1)
        for row, k in zip(m, kept):
            if k:
                np.testing.assert_allclose(row[row > 0], c / k)


def test_complementary_dropout_rates_and_errors():
    rng = np.random.default_rng(6)
    m1, m2 = complementary_masks(200, 64, 0.5, rng)
    assert abs((m1 == 0).mean() - 0.5) < 0.02
    assert not np.any((m1 == 0) & (m2 == 0))
    for bad in (0.6, 1.0, -0.1):
        with pytest.raises(ValueError):
            complementary_masks(1, 4, bad, rng)


def test_complementary_dropout_on_pyramids():
    rng = np.random.default_rng(7)
    f = [torch.ones(2, 4, 3, 3), torch.ones(2, 6, 2, 2)]
    o1, o2, masks = complementary_dropout(f, [x.clone() for x in f], 0.5, rng)
    for a, b, (m1, m2) in zip(o1, o2, masks):
        zero1 = (a == 0).all(dim=(2, 3))
        zero2 = (b == 0).all(dim=(2, 3))
        assert not torch.any(zero1 & zero2)
    same1, same2, _ = complementary_dropout(f, f, 0.0, rng)
    assert same1[0] is f[0]
    with pytest.raises(ValueError):
        complementary_dropout(f, f[:1], 0.5, rng)
