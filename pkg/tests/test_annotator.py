from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segpref.annotator import THRESHOLDS, flip_noise, generate_candidates, rate, score_candidates, write_audit
from segpref.metrics import iou


def test_rating_boundary_grid():
    grid = [0, 0.399, 0.4, 0.549, 0.55, 0.699, 0.7, 1]
    assert [rate(v) for v in grid] == [1, 1, 2, 2, 3, 3, 4, 4]
    with pytest.raises(ValueError):
        rate(1.2)


@settings(max_examples=300)
@given(st.floats(0, 1), st.floats(0, 1))
def test_rating_monotone(a, b):
    lo, hi = sorted((a, b))
    assert rate(lo) <= rate(hi)


@settings(max_examples=100)
@given(st.integers(0, 10_000))
def test_candidates_are_nested(seed):
    p = np.random.default_rng(seed).random((8, 8))
    c = generate_candidates(p)
    assert c.shape == (4, 8, 8)
    for k in range(3):
        assert not np.any(c[k + 1] & ~c[k])


def test_candidate_threshold_validation():
    with pytest.raises(ValueError):
        generate_candidates(np.zeros((2, 2)), (0.5, 0.4))


def ramp_case():
    # candidates at 0.3..0.6 shrink a 10-wide ramp; gt is the >=0.45 region
    p = np.tile(np.linspace(0.05, 0.95, 10), (4, 1))
    return p, p >= 0.45


def test_ranking_matches_sort_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(300):
        p = rng.random((12, 12))
        gt = rng.random((12, 12)) < 0.5
        cands = generate_candidates(p)
        ious = [iou(c, gt) for c in cands]
        if len(set(ious)) < 4:
            continue
        cs = score_candidates(cands, gt, "ranking")
        assert list(cs.order) == sorted(range(4), key=lambda i: -ious[i])
        assert sorted(cs.score) == [1, 2, 3, 4]
        checked += 1
    assert checked > 100


def test_rating_ties_break_by_threshold():
    p, gt = ramp_case()
    cs = score_candidates(generate_candidates(p), np.ones_like(gt), "rating")
    # every candidate has the same coarse rating against a full mask
    assert cs.rating.tolist() == [rate(v) for v in cs.iou]
    tied = [i for i in range(4) if cs.rating[i] == cs.rating[cs.best]]
    assert cs.best == min(tied)


def test_best_strategy_shares_ranking_order():
    p, gt = ramp_case()
    cands = generate_candidates(p)
    assert list(score_candidates(cands, gt, "best").order) == list(score_candidates(cands, gt, "ranking").order)
    with pytest.raises(ValueError):
        score_candidates(cands, gt, "vote")


@pytest.mark.parametrize("strategy", ["rating", "ranking"])
def test_flips_are_single_adjacent_transpositions(strategy):
    rng = np.random.default_rng(1)
    hits = 0
    for s in range(200):
        cs = score_candidates(generate_candidates(rng.random((10, 10))), rng.random((10, 10)) < 0.4, strategy)
        noisy = flip_noise(cs, 0.5, seed=s)
        if noisy.flipped is None:
            assert noisy is cs
            continue
        k, k1 = noisy.flipped
        assert k1 == k + 1
        moved = np.flatnonzero(noisy.order != cs.order)
        assert moved.tolist() == [3 - k, 4 - k]
        assert Counter(noisy.score.tolist()) == Counter(cs.score.tolist())
        assert Counter(noisy.rating.tolist()) == Counter(cs.rating.tolist())
        hits += 1
    assert 60 < hits < 140


def test_flip_fraction_extremes_and_determinism():
    p, gt = ramp_case()
    cs = score_candidates(generate_candidates(p), gt)
    assert flip_noise(cs, 0.0, seed=3) is cs
    assert flip_noise(cs, 1.0, seed=3).flipped is not None
    a, b = flip_noise(cs, 0.5, seed=11), flip_noise(cs, 0.5, seed=11)
    assert a.flipped == b.flipped and np.array_equal(a.order, b.order)
    with pytest.raises(ValueError):
        flip_noise(cs, 1.5)


def test_flip_rate_close_to_fraction():
    p, gt = ramp_case()
    cs = score_candidates(generate_candidates(p), gt)
    hits = sum(flip_noise(cs, 0.3, seed=s).flipped is not None for s in range(2000))
    assert abs(hits / 2000 - 0.3) < 0.04


def test_audit_csv(tmp_path):
    p, gt = ramp_case()
    cs = score_candidates(generate_candidates(p), gt)
    path = tmp_path / "audit.csv"
    write_audit(path, [(4, cs), (9, flip_noise(cs, 1.0, seed=0))])
    lines = path.read_text().splitlines()
    assert lines[0] == "id,thresholds,iou,rating,order,flip"
    assert lines[1].startswith("4," + " ".join(f"{t:g}" for t in THRESHOLDS))
    assert "<->" in lines[2]


def test_constant_and_binary_maps():
    c = generate_candidates(np.full((3, 3), 0.45))
    assert [bool(m.all()) for m in c] == [True, True, False, False]
    assert not c[2].any() and not c[3].any()
    b = np.random.default_rng(2).random((5, 5)) > 0.5
    assert all(np.array_equal(m, b) for m in generate_candidates(b.astype(float)))


def test_identical_candidates_keep_threshold_order():
    b = np.random.default_rng(3).random((6, 6)) > 0.5
    for strategy in ("rating", "ranking"):
        cs = score_candidates(generate_candidates(b.astype(float)), b, strategy)
        assert cs.order.tolist() == [0, 1, 2, 3]


def test_rating_coarser_than_ranking():
    # nested strips whose IoUs with gt are 0.6, 0.8, 1.0, 0.7 -> ranking separates them
    gt = np.zeros((1, 10), bool)
    gt[0, :5] = True
    p = np.zeros((1, 10))
    p[0, :2] = 0.65
    p[0, 2:5] = 0.55
    p[0, 5] = 0.45
    p[0, 6] = 0.35
    p[0, 7] = 0.35
    cs_rank = score_candidates(generate_candidates(p), gt, "ranking")
    cs_rate = score_candidates(generate_candidates(p), gt, "rating")
    assert cs_rank.iou.tolist() == pytest.approx([5 / 8, 5 / 6, 1.0, 2 / 5])
    assert cs_rank.order.tolist() == [2, 1, 0, 3]
    assert cs_rate.rating.tolist() == [3, 4, 4, 2]
    assert cs_rate.order.tolist() == [1, 2, 0, 3]
