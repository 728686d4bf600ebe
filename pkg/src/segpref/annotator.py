"""Virtual annotator: threshold candidates, IoU-based ratings or rankings, rating noise."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .metrics import iou

THRESHOLDS = (0.3, 0.4, 0.5, 0.6)
RATING_BINS = (0.4, 0.55, 0.7)
STRATEGIES = ("best", "rating", "ranking")


@dataclass(frozen=True)
class CandidateSet:
    candidates: np.ndarray  # (4, H, W) bool, in threshold order
    thresholds: tuple[float, ...]
    iou: np.ndarray
    rating: np.ndarray
    score: np.ndarray  # key the order sorts on: ratings, or ranks 4 (best) .. 1
    order: np.ndarray  # candidate indices best -> worst
    strategy: str
    flipped: tuple[int, int] | None = None

    @property
    def best(self) -> int:
        return int(self.order[0])

    def ordered(self) -> np.ndarray:
        return self.candidates[self.order]


def generate_candidates(prob_map, thresholds=THRESHOLDS) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or np.any(np.diff(t) <= 0) or t[0] <= 0 or t[-1] >= 1:
        raise ValueError(f"thresholds must be strictly increasing in (0, 1), got {thresholds}")
    p = np.asarray(prob_map)
    return p[None] >= t.reshape(-1, *([1] * p.ndim))


def rate(iou_value: float) -> int:
    """Bin an IoU into 1..4 using left-closed bins [0, .4), [.4, .55), [.55, .7), [.7, 1]."""
    if not 0.0 <= iou_value <= 1.0:
        raise ValueError(f"rate: IoU {iou_value} outside [0, 1]")
    return 1 + sum(iou_value >= edge for edge in RATING_BINS)


def _order(score: np.ndarray) -> np.ndarray:
    # stable sort on -score keeps ascending-threshold order within ties
    return np.argsort(-score, kind="stable")


def _ranks(ious: np.ndarray) -> np.ndarray:
    ranks = np.empty(len(ious), dtype=int)
    ranks[_order(ious)] = np.arange(len(ious), 0, -1)
    return ranks


def score_candidates(candidates, gt_mask, strategy: str = "ranking", thresholds=THRESHOLDS) -> CandidateSet:
    """Rate candidates against the ground truth, which is consulted only here."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    cands = np.asarray(candidates, dtype=bool)
    ious = np.array([iou(c, gt_mask) for c in cands])
    ratings = np.array([rate(v) for v in ious])
    score = ratings if strategy == "rating" else _ranks(ious)
    return CandidateSet(cands, tuple(thresholds), ious, ratings, score, _order(score), strategy)


def flip_noise(cs: CandidateSet, flip_fraction: float, seed=0) -> CandidateSet:
    """With probability ``flip_fraction`` swap one adjacent pair of levels (1-2, 2-3 or 3-4).

    Level k is the candidate at rank k (4 = best): the two candidates exchange
    their scores and their places in the order, so the multiset of scores is
    unchanged. The decision and the pair come from ``seed`` alone, so a sample
    seeded the same way is corrupted the same way every time it is rated.
    """
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError("flip_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    hit = rng.random() < flip_fraction
    k = int(rng.integers(1, 4))
    if not hit:
        return cs
    n = len(cs.order)
    # positions in the best -> worst order holding levels k + 1 and k
    hi_pos, lo_pos = n - k - 1, n - k
    order = cs.order.copy()
    order[hi_pos], order[lo_pos] = order[lo_pos], order[hi_pos]
    a, b = cs.order[hi_pos], cs.order[lo_pos]
    score = cs.score.copy()
    score[a], score[b] = score[b], score[a]
    rating = score if cs.strategy == "rating" else cs.rating
    return replace(cs, score=score, rating=rating, order=order, flipped=(k, k + 1))


def write_audit(path, rows) -> None:
    """CSV audit of annotator decisions; ``rows`` yields (sample_id, CandidateSet)."""
    new = not Path(path).exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["id", "thresholds", "iou", "rating", "order", "flip"])
        for sid, cs in rows:
            w.writerow([
                sid,
                " ".join(f"{t:g}" for t in cs.thresholds),
                " ".join(f"{v:.6f}" for v in cs.iou),
                " ".join(str(int(r)) for r in cs.rating),
                " ".join(str(int(o)) for o in cs.order),
                "" if cs.flipped is None else f"{cs.flipped[0]}<->{cs.flipped[1]}",
            ])
