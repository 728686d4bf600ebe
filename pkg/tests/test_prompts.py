import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segpref import prompts as pp
from segpref.prompts import (
    BoundingBox,
    CrfParams,
    EmptyPromptError,
    PointPrompt,
    PromptConfig,
    PromptSet,
    connected_components,
    crf_refine,
    extract_box,
    prompts_from_prob,
    sample_points,
    select_components,
)
from segpref.synthdata import make_heatmap, make_image, make_mask

sys.setrecursionlimit(10_000)


def flood_fill_oracle(mask, connectivity):
    """Recursive flood fill; returns components as sets of (r, c)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    if connectivity == 4:
        steps = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]

    def fill(r, c, acc):
        seen[r, c] = True
        acc.add((r, c))
        for dr, dc in steps:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                fill(rr, cc, acc)

    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                acc = set()
                fill(r, c, acc)
                comps.append(acc)
    return comps


def brute_messages(image, p, q):
    h, w = image.shape
    rc = np.argwhere(np.ones((h, w), bool)).astype(float)
    d2 = ((rc[:, None] - rc[None]) ** 2).sum(-1)
    di = np.subtract.outer(image.ravel(), image.ravel()) ** 2
    k = p.appearance_weight * np.exp(-d2 / (2 * p.appearance_sigma_xy**2) - di / (2 * p.appearance_sigma_intensity**2))
    k += p.smoothness_weight * np.exp(-d2 / (2 * p.smoothness_sigma_xy**2))
    np.fill_diagonal(k, 0.0)
    return k @ q


@pytest.mark.parametrize("connectivity", [4, 8])
def test_components_match_flood_fill(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(100):
        m = rng.random((16, 16)) < rng.uniform(0.2, 0.6)
        got = [set(map(tuple, c.tolist())) for c in connected_components(m, connectivity)]
        want = flood_fill_oracle(m, connectivity)
        assert sorted(map(sorted, got)) == sorted(map(sorted, want))
        sizes = [len(c) for c in got]
        assert sizes == sorted(sizes, reverse=True)


def test_component_tie_break_is_raster_order():
    m = np.zeros((6, 6), bool)
    m[4, 4] = m[0, 3] = m[2, 0] = True
    comps = connected_components(m)
    assert [tuple(c[0]) for c in comps] == [(0, 3), (2, 0), (4, 4)]


def test_connectivity_differs_on_diagonal():
    m = np.eye(4, dtype=bool)
    assert len(connected_components(m, 8)) == 1
    assert len(connected_components(m, 4)) == 4


def test_messages_match_brute_force_kernel():
    rng = np.random.default_rng(0)
    image = rng.random((7, 9))
    p = CrfParams(appearance_weight=0.7, smoothness_weight=0.4, appearance_sigma_xy=2.5, smoothness_sigma_xy=1.3)
    q = rng.random((63, 2))
    got = pp._PairwiseMessages(image, p)(q)
    np.testing.assert_allclose(got, brute_messages(image, p, q), rtol=0, atol=1e-12)


def test_chunked_appearance_matches_dense():
    rng = np.random.default_rng(1)
    image = rng.random((5, 6))
    p = CrfParams(smoothness_weight=0.0, appearance_weight=1.0, appearance_sigma_xy=2.0)
    m = pp._PairwiseMessages(image, p)
    q = rng.random((30, 2))
    dense = m(q)
    m.dense, m.chunk = None, 7
    np.testing.assert_allclose(m(q), dense, rtol=0, atol=1e-13)


def test_two_pixel_hand_computation():
    p = CrfParams(iterations=2, appearance_weight=0.8, smoothness_weight=0.3, appearance_sigma_xy=1.5,
                  appearance_sigma_intensity=0.5, smoothness_sigma_xy=1.0)
    h = np.array([[0.9, 0.2]])
    img = np.array([[0.3, 0.5]])
    k = 0.8 * math.exp(-1 / (2 * 1.5**2) - 0.04 / (2 * 0.25)) + 0.3 * math.exp(-1 / 2)
    fg = [0.9, 0.2]
    for _ in range(2):
        new = []
        for i, j in ((0, 1), (1, 0)):
            e_fg = -math.log(0.9 if i == 0 else 0.2) + k * (1 - fg[j])
            e_bg = -math.log(0.1 if i == 0 else 0.8) + k * fg[j]
            new.append(1 / (1 + math.exp(e_fg - e_bg)))
        fg = new
    np.testing.assert_allclose(crf_refine(h, img, p)[0], fg, rtol=0, atol=1e-14)


def test_crf_distributions_normalize_every_iteration():
    rng = np.random.default_rng(2)
    gt = make_mask(32, rng)
    img = make_image(gt, 1, rng)
    heat = make_heatmap(gt, seed=3)
    _, hist = crf_refine(heat, img, CrfParams(iterations=8), return_history=True)
    assert len(hist) == 9
    for q in hist:
        assert np.max(np.abs(q.sum(axis=1) - 1.0)) <= 1e-6
        assert np.all(q >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_zero_pairwise_is_normalized_unary(seed, iterations):
    rng = np.random.default_rng(seed)
    heat = rng.random((10, 12))
    out = crf_refine(heat, rng.random((10, 12)), CrfParams(iterations=iterations, appearance_weight=0, smoothness_weight=0))
    expected = np.clip(heat, pp.UNARY_EPS, 1 - pp.UNARY_EPS)
    assert np.max(np.abs(out - expected)) < 1e-9


def test_crf_smooths_isolated_noise():
    heat = np.zeros((16, 16))
    heat[4:12, 4:12] = 0.9
    heat[4:12, 4:12][3, 3] = 0.4  # a hole
    heat[1, 14] = 0.6  # a speck
    img = (heat > 0.5).astype(float)
    out = crf_refine(heat, img, CrfParams(smoothness_weight=1.0))
    assert out[7, 7] > 0.5 and out[1, 14] < 0.5


def test_crf_rejects_large_and_mismatched():
    with pytest.raises(ValueError, match="96"):
        crf_refine(np.zeros((97, 97)), np.zeros((97, 97)))
    with pytest.raises(ValueError):
        crf_refine(np.zeros((4, 4)), np.zeros((4, 5)))


def test_boxes_and_points():
    rng = np.random.default_rng(4)
    for _ in range(50):
        m = rng.random((16, 16)) < 0.3
        for j, comp in enumerate(connected_components(m)):
            box = extract_box(comp)
            inside = set(map(tuple, comp.tolist()))
            assert all(box.contains(r, c) for r, c in inside)
            # tight: every side touches the component
            rows, cols = comp[:, 0], comp[:, 1]
            assert rows.min() == box.r0 and rows.max() == box.r1
            assert cols.min() == box.c0 and cols.max() == box.c1
            for pt in sample_points(comp, 3, seed=j):
                assert (pt.row, pt.col) in inside


def test_sample_points_deterministic_and_capped():
    comp = np.array([[0, 0], [0, 1]])
    assert len(sample_points(comp, 5)) == 2
    big = np.argwhere(np.ones((5, 5)))
    assert sample_points(big, 3, seed=9) == sample_points(big, 3, seed=9)


def test_select_components():
    comps = [np.zeros((n, 2), int) for n in (30, 20, 3)]
    assert [len(c) for c in select_components(comps, 2, 0.01, 1000)] == [30, 20]
    assert [len(c) for c in select_components(comps, 1, 0.01, 1000)] == [30]
    with pytest.raises(EmptyPromptError):
        select_components(comps, 2, 0.1, 1000)
    with pytest.raises(EmptyPromptError):
        select_components([], 2, 0.0, 100)


def test_prompt_set_validation():
    box = BoundingBox(0, 0, 3, 3)
    with pytest.raises(ValueError):
        PromptSet([], [])
    with pytest.raises(ValueError):
        PromptSet([box, box, box], [])
    with pytest.raises(ValueError):
        PromptSet([box], [PointPrompt(5, 5)])


def test_empty_heatmap_raises():
    with pytest.raises(EmptyPromptError):
        prompts_from_prob(np.zeros((16, 16)), np.zeros(16))


def tight_box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ir = max(0, min(a.r1, b.r1) - max(a.r0, b.r0) + 1)
    ic = max(0, min(a.c1, b.c1) - max(a.c0, b.c0) + 1)
    area = lambda x: (x.r1 - x.r0 + 1) * (x.c1 - x.c0 + 1)
    inter = ir * ic
    return inter / (area(a) + area(b) - inter)


def test_noise_free_heatmaps_give_exact_boxes():
    cfg = PromptConfig()
    for s in range(10):
        rng = np.random.default_rng([5, s])
        gt = make_mask(32, rng)
        img = make_image(gt, s % 3, rng)
        heat = make_heatmap(gt, blur_radius=0.0, noise_level=0.0, seed=s)
        ps = prompts_from_prob(crf_refine(heat, img, cfg.crf), np.zeros(16), cfg, seed=s)
        want = [extract_box(c) for c in connected_components(gt)][:2]
        assert len(ps.boxes) == len(want)
        assert all(tight_box_iou(a, b) == 1.0 for a, b in zip(ps.boxes, want))
