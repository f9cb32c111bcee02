import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_first_window, naive_window_valid, uf_component_sizes

from sss.pcsw import (BoxPrompt, PointPrompt, PromptSet, PseudoMaskHead, PseudoMaskVolume,
                      VolumeTooShortError, component_prompt, connected_components,
                      connectivity_ratio, enumerate_windows, label_components,
                      predict_pseudo_masks, prompts_from_labels, prompts_from_window,
                      raw_prompts, run_pcsw, scan_windows, select_valid_window, window_band)
from sss.volumes import generate_synthetic_dataset


def salt_and_pepper(rng, shape, density=0.05):
    return (rng.random(shape) < density).astype(np.int64)


# -- components --------------------------------------------------------------------


def test_components_exhaustive_3x3():
    for bits in itertools.product((0, 1), repeat=9):
        grid = np.array(bits, dtype=bool).reshape(3, 3)
        assert connected_components(grid.astype(int), 1) == uf_component_sizes(grid)


def test_components_random_16x16():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        grid = rng.random((16, 16)) < rng.uniform(0.1, 0.7)
        assert connected_components(grid.astype(int), 1) == uf_component_sizes(grid)


def test_component_examples():
    one = np.zeros((5, 5), int)
    one[2, 2] = 1
    assert connected_components(one, 1) == [1]
    diag = np.zeros((4, 4), int)
    diag[1, 1] = diag[2, 2] = 1
    assert connected_components(diag, 1) == [2]
    assert connected_components(np.zeros((4, 4), int), 1) == []


def test_label_image_numbers_components_in_raster_order():
    g = np.array([[1, 0, 0, 1],
                  [0, 0, 0, 1],
                  [1, 1, 0, 0]], bool)
    labels, sizes = label_components(g)
    assert labels[0, 0] == 1 and labels[0, 3] == 2 and labels[2, 0] == 3
    assert sizes == [1, 2, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_component_sizes_invariant_to_transposition_and_flips(seed):
    # visit order changes under these symmetries; the size multiset must not
    rng = np.random.default_rng(seed)
    g = rng.random((9, 11)) < 0.45
    ref = connected_components(g.astype(int), 1)
    for t in (g.T, g[::-1], g[:, ::-1], np.rot90(g)):
        assert connected_components(t.astype(int), 1) == ref


# -- windows -------------------------------------------------------------------------


def test_window_band_s12():
    assert list(window_band(12)) == [4, 5, 6]
    wins = enumerate_windows(12)
    counts = {n: sum(1 for _, m in wins if m == n) for n in (4, 5, 6)}
    assert counts == {4: 9, 5: 8, 6: 7}
    assert wins[0] == (0, 4)  # slices 0..3 (0-based)


def test_window_band_s3_and_strict():
    assert enumerate_windows(3) == [(0, 1), (1, 1), (2, 1)]
    assert list(window_band(12, strict=True)) == [5]
    with pytest.raises(VolumeTooShortError):
        enumerate_windows(3, strict=True)
    with pytest.raises(VolumeTooShortError):
        enumerate_windows(1)


def test_ratio_examples():
    one = np.zeros((1, 6, 6), int)
    one[0, 1:3, 1:3] = 1
    assert connectivity_ratio(one, 1) == 1.0
    two = np.zeros((1, 8, 8), int)
    two[0, 0:2, 0:2] = 1
    two[0, 5:7, 5:7] = 1
    assert connectivity_ratio(two, 1) == 0.5
    assert connectivity_ratio(np.zeros((2, 4, 4), int), 1) is None


def test_ratio_sums_per_slice_largest_components():
    w = np.zeros((2, 8, 8), int)
    w[0, 0:3, 0:3] = 1      # 9
    w[0, 6, 6] = 1          # 1
    w[1, 0:2, 0:2] = 1      # 4
    assert connectivity_ratio(w, 1) == pytest.approx(13 / 14)


def random_pseudo_volume(rng, s=8, h=10, w=10, k=3):
    kind = rng.integers(3)
    if kind == 0:
        hard = rng.integers(0, k, size=(s, h, w))
    elif kind == 1:
        hard = np.where(rng.random((s, h, w)) < 0.1, rng.integers(1, k, size=(s, h, w)), 0)
    else:
        hard = np.zeros((s, h, w), int)
        y, x = rng.integers(0, h - 4), rng.integers(0, w - 4)
        z0 = rng.integers(0, s - 3)
        hard[z0:z0 + rng.integers(2, s - z0 + 1), y:y + 4, x:x + 4] = 1
        hard[rng.random((s, h, w)) < 0.03] = rng.integers(1, k)
    return hard


def test_validity_matches_naive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(40):
        hard = random_pseudo_volume(rng)
        tau = float(rng.choice([0.0, 0.3, 0.6, 0.8, 1.0]))
        for cand in scan_windows(hard, tau):
            assert cand.valid == naive_window_valid(hard, cand.start, cand.length, tau)
        win = select_valid_window(hard, tau)
        ref = naive_first_window(hard, tau)
        assert (None if win is None else (win.start, win.length)) == ref


def test_tau_monotonicity_200_volumes():
    rng = np.random.default_rng(17)
    taus = np.linspace(0, 1, 11)
    for _ in range(200):
        hard = random_pseudo_volume(rng)
        valid = [{(c.start, c.length) for c in scan_windows(hard, t) if c.valid} for t in taus]
        for hi in range(len(taus)):
            for lo in range(hi):
                assert valid[hi] <= valid[lo]


def test_first_valid_window_deterministic_and_first():
    rng = np.random.default_rng(3)
    for _ in range(20):
        hard = random_pseudo_volume(rng)
        a = select_valid_window(hard, 0.5)
        b = select_valid_window(hard.copy(), 0.5)
        assert (a is None) == (b is None)
        if a is not None:
            assert (a.start, a.length) == (b.start, b.length)
            order = enumerate_windows(hard.shape[0])
            before = order[:order.index((a.start, a.length))]
            assert not any(naive_window_valid(hard, i, n, 0.5) for i, n in before)


def test_tau_zero_takes_first_window_with_consistent_classes():
    hard = np.zeros((12, 8, 8), int)
    hard[5:, 2, 2] = 1
    hard[5:, 6, 6] = 1   # two components per slice: ratio 0.5
    win = select_valid_window(hard, 0.0)
    assert (win.start, win.length) == (5, 4)
    assert select_valid_window(hard, 0.8) is None


def test_synthetic_lesions_accepted_and_noise_rejected():
    split = generate_synthetic_dataset(0, 20, (12, 32, 32), 2, 0.5)
    masks = [m for _, m in split.labeled] + split.unlabeled_masks
    assert all(select_valid_window(m.labels, 0.8) is not None for m in masks)
    rejected = 0
    for seed in range(100):
        noise = salt_and_pepper(np.random.default_rng(seed), (12, 32, 32))
        rejected += select_valid_window(noise, 0.8) is None
    assert rejected >= 95


def test_class_set_consistency_required():
    hard = np.zeros((6, 8, 8), int)
    hard[:, 1:3, 1:3] = 1
    hard[1, 5:7, 5:7] = 2  # class 2 only in slice 1
    wins = {(c.start, c.length): c for c in scan_windows(hard, 0.8)}
    assert not wins[(0, 2)].consistent
    assert wins[(2, 2)].valid


def test_merged_class_mode():
    hard = np.zeros((4, 8, 8), int)
    hard[:, 1:3, 1:3] = 1
    hard[:, 1:3, 3:5] = 2   # adjacent to class 1: one merged blob
    merged = scan_windows(hard, 0.8, per_class=False)[0]
    assert merged.ratios == {0: 1.0}
    per = scan_windows(hard, 0.8)[0]
    assert per.ratios == {1: 1.0, 2: 1.0}


# -- pseudo masks -----------------------------------------------------------------------


def test_predict_pseudo_masks_normalised_and_argmax():
    torch.manual_seed(0)
    head = PseudoMaskHead((4, 6), 3)
    pyr = [torch.randn(2, 4, 8, 8), torch.randn(2, 6, 4, 4)]
    pm = predict_pseudo_masks(pyr, head, (8, 8), 3)
    assert pm.probs.shape == (2, 8, 8, 3)
    np.testing.assert_allclose(pm.probs.sum(-1), 1.0, atol=1e-6)
    for idx in np.ndindex(pm.hard.shape):
        p = pm.probs[idx]
        best = max(range(3), key=lambda c: (p[c], -c))
        assert pm.hard[idx] == best
    with pytest.raises(ValueError):
        predict_pseudo_masks(pyr, head, (8, 8), 2)


def test_uniform_logits_give_uniform_probs():
    head = PseudoMaskHead((4,), 4)
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    pm = predict_pseudo_masks([torch.randn(1, 4, 4, 4)], head, (4, 4))
    np.testing.assert_allclose(pm.probs, 0.25, atol=1e-12)


def test_pseudo_mask_volume_from_labels():
    lab = np.array([[[0, 1], [2, 1]]])
    pm = PseudoMaskVolume.from_labels(lab, 3)
    assert pm.num_classes == 3
    np.testing.assert_array_equal(pm.hard, lab)


# -- prompts --------------------------------------------------------------------------------


def test_rectangle_prompt():
    comp = np.zeros((10, 10), bool)
    comp[2:5, 3:8] = True
    point, box = component_prompt(comp, 4, 1)
    assert (point.y, point.x) == (3, 5)
    assert box == BoxPrompt(4, 2, 3, 4, 7, 1)


def test_single_pixel_component_has_no_box():
    comp = np.zeros((5, 5), bool)
    comp[1, 1] = True
    point, box = component_prompt(comp, 0, 2)
    assert point == PointPrompt(0, 1, 1, 2) and box is None


def test_largest_component_only_and_empty_slice():
    lab = np.zeros((2, 10, 10), int)
    lab[0, 0:2, 0:2] = 1
    lab[0, 5:9, 5:9] = 1
    ps = prompts_from_labels(lab, [7, 8])
    assert len(ps.points) == 1 and ps.points[0].slice == 7
    assert ps.boxes[0] == BoxPrompt(7, 5, 5, 8, 8, 1)
    assert ps.for_slice(8).points == []


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prompt_point_lies_inside_its_component(seed):
    rng = np.random.default_rng(seed)
    lab = (rng.random((3, 12, 12)) < 0.35).astype(int) * rng.integers(1, 3, size=(3, 12, 12))
    ps = prompts_from_labels(lab, range(3))
    for p in ps.points:
        comp_lab, sizes = label_components(lab[p.slice] == p.class_id)
        biggest = int(np.argmax(sizes)) + 1
        assert comp_lab[p.y, p.x] == biggest
    for b in ps.boxes:
        assert 0 <= b.y0 <= b.y1 < 12 and 0 <= b.x0 <= b.x1 < 12


def test_prompts_only_from_window_slices():
    hard = np.zeros((12, 16, 16), int)
    hard[3:9, 4:9, 4:9] = 1
    hard[0, 12:14, 12:14] = 1
    res = run_pcsw(hard, 0.8)
    assert res.window is not None
    assert set(res.prompts.slices) <= set(res.window.slices)
    assert prompts_from_window(res.window, hard).to_dict() == res.prompts.to_dict()
    assert 0 in raw_prompts(hard).slices
    d = res.to_dict()
    assert d["selected"]["start"] == res.window.start
    assert len(d["windows"]) == len(enumerate_windows(12))


def test_empty_prompt_set():
    assert len(PromptSet()) == 0
    res = run_pcsw(np.zeros((12, 8, 8), int), 0.8)
    assert res.window is None and len(res.prompts) == 0
