"""Unsupervised geometric prompts: heatmap -> dense CRF -> components -> boxes and points."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import label

log = logging.getLogger(__name__)

UNARY_EPS = 1e-4
MAX_DENSE_PIXELS = 96 * 96
_STRUCTURES = {4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]), 8: np.ones((3, 3), dtype=int)}


class EmptyPromptError(ValueError):
    """No foreground component survived selection; the sample cannot be prompted."""


@dataclass(frozen=True)
class BoundingBox:
    r0: int
    c0: int
    r1: int
    c1: int

    def contains(self, r: int, c: int) -> bool:
        return self.r0 <= r <= self.r1 and self.c0 <= c <= self.c1


@dataclass(frozen=True)
class PointPrompt:
    row: int
    col: int
    label: bool = True


@dataclass
class PromptSet:
    boxes: list[BoundingBox]
    points: list[PointPrompt]
    text_stub: np.ndarray = field(default_factory=lambda: np.zeros(16))

    def __post_init__(self):
        if not 1 <= len(self.boxes) <= 2:
            raise ValueError(f"PromptSet needs 1 or 2 boxes, got {len(self.boxes)}")
        for p in self.points:
            if not any(b.contains(p.row, p.col) for b in self.boxes):
                raise ValueError(f"point {p} lies outside every box")


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 5
    unary_scale: float = 1.0
    appearance_weight: float = 0.05
    appearance_sigma_xy: float = 6.0
    appearance_sigma_intensity: float = 0.08
    smoothness_weight: float = 0.5
    smoothness_sigma_xy: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("CRF needs at least one iteration")
        if min(self.appearance_sigma_xy, self.appearance_sigma_intensity, self.smoothness_sigma_xy) <= 0:
            raise ValueError("CRF kernel widths must be positive")
        if min(self.appearance_weight, self.smoothness_weight, self.unary_scale) < 0:
            raise ValueError("CRF weights must be non-negative")


# ---------------------------------------------------------------- CRF


def _axis_gauss(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n, dtype=np.float64)
    return np.exp(-np.subtract.outer(x, x) ** 2 / (2 * sigma**2))


class _PairwiseMessages:
    """Computes sum_j k(i, j) Q_j over all pairs j != i for an H x W grid.

    The smoothness kernel factorises over rows and columns and is applied as
    two small matrix products; the appearance kernel depends on intensities
    and is held as an explicit dense (N, N) matrix (or rebuilt in row chunks
    when that would be too large).
    """

    def __init__(self, image: np.ndarray, p: CrfParams):
        self.h, self.w = image.shape
        self.n = self.h * self.w
        self.p = p
        self.intensity = image.ravel()
        if p.smoothness_weight > 0:
            self.er = _axis_gauss(self.h, p.smoothness_sigma_xy)
            self.ec = _axis_gauss(self.w, p.smoothness_sigma_xy)
        if p.appearance_weight > 0:
            self.ar = _axis_gauss(self.h, p.appearance_sigma_xy)
            self.ac = _axis_gauss(self.w, p.appearance_sigma_xy)
            self.chunk = max(1, (1 << 22) // self.n)
            self.dense = self._appearance_rows(0, self.n) if self.n <= 4096 else None

    def _appearance_rows(self, start: int, stop: int) -> np.ndarray:
        p = self.p
        k = np.subtract.outer(self.intensity[start:stop], self.intensity)
        np.square(k, out=k)
        k *= -1.0 / (2 * p.appearance_sigma_intensity**2)
        np.exp(k, out=k)
        idx = np.arange(start, stop)
        r, c = np.divmod(idx, self.w)
        k *= (self.ar[r][:, :, None] * self.ac[c][:, None, :]).reshape(len(idx), self.n)
        k *= p.appearance_weight
        k[idx - start, idx] = 0.0
        return k

    def __call__(self, q: np.ndarray) -> np.ndarray:
        out = np.zeros_like(q)
        if self.p.smoothness_weight > 0:
            grid = q.T.reshape(-1, self.h, self.w)
            smooth = (self.er @ grid @ self.ec.T).reshape(q.shape[1], -1).T
            out += self.p.smoothness_weight * (smooth - q)
        if self.p.appearance_weight > 0:
            if self.dense is not None:
                out += self.dense @ q
            else:
                for s in range(0, self.n, self.chunk):
                    e = min(self.n, s + self.chunk)
                    out[s:e] += self._appearance_rows(s, e) @ q
        return out


def _softmax2(energy: np.ndarray) -> np.ndarray:
    e = energy - energy.min(axis=1, keepdims=True)
    q = np.exp(-e)
    return q / q.sum(axis=1, keepdims=True)


def unary_energy(heatmap: np.ndarray, unary_scale: float = 1.0) -> np.ndarray:
    """(N, 2) energies for (background, foreground) from floored foreground probabilities."""
    pf = np.clip(np.asarray(heatmap, dtype=np.float64).reshape(-1), UNARY_EPS, 1 - UNARY_EPS)
    return -unary_scale * np.log(np.stack([1 - pf, pf], axis=1))


def crf_refine(heatmap, image, params: CrfParams = CrfParams(), return_history: bool = False):
    """Mean-field inference on a fully connected two-label CRF with Potts compatibility.

    Each update sets Q_i(l) proportional to exp(-U_i(l) - sum_j k(i, j) (1 - Q_j(l))).
    All pixel pairs are used exactly, so the image must be small. Returns the
    foreground marginal as an H x W map (and the per-iteration (N, 2)
    marginals when ``return_history`` is set).
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if heatmap.shape != image.shape or heatmap.ndim != 2:
        raise ValueError(f"crf_refine: heatmap {heatmap.shape} and image {image.shape} must be equal 2-D shapes")
    h, w = heatmap.shape
    n = h * w
    if n > MAX_DENSE_PIXELS:
        raise ValueError(
            f"crf_refine: {h}x{w} exceeds the exact dense limit of {MAX_DENSE_PIXELS} pixels; downscale to <= 96x96"
        )
    unary = unary_energy(heatmap, params.unary_scale)
    q = _softmax2(unary)
    history = [q]
    if params.appearance_weight == 0 and params.smoothness_weight == 0:
        history *= params.iterations + 1
    else:
        messages = _PairwiseMessages(image, params)
        ones = np.ones((n, 1))
        rowsum = messages(ones)
        for _ in range(params.iterations):
            # Potts: label l pays k(i, j) for every neighbour mass not on l
            q = _softmax2(unary + (rowsum - messages(q)))
            history.append(q)
    fg = q[:, 1].reshape(h, w)
    return (fg, history) if return_history else fg


# ---------------------------------------------------------------- components


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("binarize: threshold must lie in (0, 1)")
    return np.asarray(prob_map) >= threshold


def connected_components(mask, connectivity: int = 8) -> list[np.ndarray]:
    """Foreground components as (k, 2) arrays of (row, col), largest first.

    Equal areas are ordered by their first pixel in raster order.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = label(np.asarray(mask, dtype=bool), structure=_STRUCTURES[connectivity])
    if count == 0:
        return []
    comps = [np.argwhere(labels == k) for k in range(1, count + 1)]
    # argwhere is raster ordered, so comp[0] is the top-left pixel
    comps.sort(key=lambda c: (-len(c), int(c[0, 0]), int(c[0, 1])))
    return comps


def select_components(components, max_k: int, min_area_fraction: float, image_area: int) -> list[np.ndarray]:
    if max_k not in (1, 2):
        raise ValueError("max_k must be 1 or 2")
    if not 0 <= min_area_fraction < 0.5:
        raise ValueError("min_area_fraction must be in [0, 0.5)")
    floor = min_area_fraction * image_area
    kept = [c for c in components if len(c) >= floor][:max_k]
    if not kept:
        raise EmptyPromptError(f"no component with area >= {floor:.1f} px")
    return kept


def extract_box(component) -> BoundingBox:
    comp = np.asarray(component)
    if comp.size == 0:
        raise ValueError("extract_box: empty component")
    r0, c0 = comp.min(axis=0)
    r1, c1 = comp.max(axis=0)
    return BoundingBox(int(r0), int(c0), int(r1), int(c1))


def sample_points(component, k: int, seed=0) -> list[PointPrompt]:
    comp = np.asarray(component)
    if len(comp) == 0:
        raise ValueError("sample_points: empty component")
    if k < 1:
        raise ValueError("sample_points: k must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(comp), size=min(k, len(comp)), replace=False)
    return [PointPrompt(int(comp[i, 0]), int(comp[i, 1]), True) for i in idx]


@dataclass(frozen=True)
class PromptConfig:
    crf: CrfParams = CrfParams()
    bin_threshold: float = 0.5
    max_k: int = 2
    points_per_box: int = 3
    min_area_fraction: float = 0.005
    connectivity: int = 8


def prompts_from_prob(prob_map, text_stub, cfg: PromptConfig = PromptConfig(), seed=0) -> PromptSet:
    mask = binarize(prob_map, cfg.bin_threshold)
    comps = select_components(
        connected_components(mask, cfg.connectivity), cfg.max_k, cfg.min_area_fraction, mask.size
    )
    boxes, points = [], []
    for j, comp in enumerate(comps):
        boxes.append(extract_box(comp))
        points += sample_points(comp, cfg.points_per_box, seed=np.random.SeedSequence([int(s) for s in np.atleast_1d(seed)] + [j]))
    return PromptSet(boxes, points, np.asarray(text_stub, dtype=np.float64).copy())


def build_prompts(sample, cfg: PromptConfig = PromptConfig(), seed=0) -> PromptSet:
    """CRF-refine the sample's heatmap and turn its main components into prompts."""
    refined = crf_refine(sample.heatmap, sample.image, cfg.crf)
    return prompts_from_prob(refined, sample.text_stub, cfg, seed)


def dump_prompts(path, sample_id: int, prompts: PromptSet, seed) -> None:
    """Append a plain-text record of one sample's prompts."""
    boxes = ";".join(f"{b.r0},{b.c0},{b.r1},{b.c1}" for b in prompts.boxes)
    points = ";".join(f"{p.row},{p.col}" for p in prompts.points)
    with open(Path(path), "a") as f:
        f.write(f"id={sample_id} seed={seed} boxes={boxes} points={points}\n")
