"""Overlap and boundary metrics for binary masks, plus report aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt


def _pair(a, b, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    a, b = _pair(a, b, "iou")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice(a, b) -> float:
    a, b = _pair(a, b, "dice")
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def surface_dice(a, b, tolerance_px: float = 1.0) -> float:
    """Symmetric fraction of boundary pixels within ``tolerance_px`` of the other boundary."""
    a, b = _pair(a, b, "surface_dice")
    if tolerance_px < 0:
        raise ValueError("surface_dice: tolerance must be non-negative")
    ba, bb = boundary(a), boundary(b)
    na, nb = np.count_nonzero(ba), np.count_nonzero(bb)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    # distance from every pixel to the nearest boundary pixel of the other mask
    dist_to_b = distance_transform_edt(~bb)
    dist_to_a = distance_transform_edt(~ba)
    close_a = np.count_nonzero(dist_to_b[ba] <= tolerance_px)
    close_b = np.count_nonzero(dist_to_a[bb] <= tolerance_px)
    return (close_a + close_b) / (na + nb)


@dataclass
class MetricRow:
    id: int
    class_id: int
    dice: float
    iou: float
    sdc: float


@dataclass
class MetricReport:
    rows: list[MetricRow]
    class_means: dict[int, tuple[float, float, float]]
    mean_dice: float
    mean_iou: float
    mean_sdc: float
    tolerance_px: float = 1.0
    header: dict[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        meta = dict(self.header)
        meta["sdc_tolerance_px"] = repr(float(self.tolerance_px))
        for key in sorted(meta):
            buf.write(f"# {key}={meta[key]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "id", "class", "dice", "iou", "sdc"])
        for r in self.rows:
            w.writerow(["sample", r.id, r.class_id, repr(r.dice), repr(r.iou), repr(r.sdc)])
        for cls in sorted(self.class_means):
            d, i, s = self.class_means[cls]
            w.writerow(["class", "", cls, repr(d), repr(i), repr(s)])
        w.writerow(["mean", "", "", repr(self.mean_dice), repr(self.mean_iou), repr(self.mean_sdc)])
        return buf.getvalue()


def aggregate(rows: list[MetricRow], tolerance_px: float = 1.0) -> MetricReport:
    if not rows:
        raise ValueError("aggregate: no rows")
    by_class: dict[int, list[MetricRow]] = {}
    for r in rows:
        by_class.setdefault(r.class_id, []).append(r)
    class_means = {
        cls: (
            float(np.mean([r.dice for r in rs])),
            float(np.mean([r.iou for r in rs])),
            float(np.mean([r.sdc for r in rs])),
        )
        for cls, rs in by_class.items()
    }
    return MetricReport(
        rows=list(rows),
        class_means=class_means,
        mean_dice=float(np.mean([r.dice for r in rows])),
        mean_iou=float(np.mean([r.iou for r in rows])),
        mean_sdc=float(np.mean([r.sdc for r in rows])),
        tolerance_px=tolerance_px,
    )


def score_masks(ids, class_ids, preds, gts, tolerance_px: float = 1.0) -> MetricReport:
    rows = [
        MetricRow(int(i), int(c), dice(p, g), iou(p, g), surface_dice(p, g, tolerance_px))
        for i, c, p, g in zip(ids, class_ids, preds, gts)
    ]
    return aggregate(rows, tolerance_px)
