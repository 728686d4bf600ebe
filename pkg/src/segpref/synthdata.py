"""Synthetic blob corpus: images, masks, saliency heatmaps and text stubs.

On-disk layout under the output directory::

    manifest.txt                  key = value header, then a [samples] table
    images/000000.pgm             8-bit P5
    masks/000000.pgm              {0, 255}
    heatmaps/000000.pgm           8-bit P5

Arrays held in memory are the 8-bit quantised values divided by 255, so
loading a generated corpus reproduces them exactly.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, label

log = logging.getLogger(__name__)

SPLITS = ("annotated-train", "unannotated-train", "test")
TEXT_DIM = 16
MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "# segpref dataset manifest v1"
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class CorruptPayloadError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass
class SampleRecord:
    id: int
    image: np.ndarray
    gt_mask: np.ndarray
    heatmap: np.ndarray
    class_id: int
    text_stub: np.ndarray
    split: str


@dataclass
class DatasetManifest:
    seed: int
    height: int
    width: int
    n: int
    class_count: int
    split_counts: dict[str, int]
    text_stubs: np.ndarray
    rows: list[tuple[int, int, str, str, str, str]]  # id, class, split, image, mask, heatmap
    root: Path = field(default_factory=Path)
    blur_radius: float = 2.0
    noise_level: float = 0.3

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[SampleRecord]

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [s for s in self.samples if s.split == name]


# ---------------------------------------------------------------- PGM


def write_pgm(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptPayloadError(f"truncated PGM header: {path}")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise CorruptPayloadError(f"not a binary PGM (P5): {path}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorruptPayloadError(f"bad PGM header values in {path}") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise CorruptPayloadError(f"unsupported PGM header (w={w}, h={h}, maxval={maxval}): {path}")
    payload = raw[pos : pos + w * h]
    if len(payload) != w * h:
        raise CorruptPayloadError(f"PGM payload truncated ({len(payload)} of {w * h} bytes): {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------- generation


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _blob(size: int, rng: np.random.Generator) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(float)
    a = rng.uniform(0.08, 0.22) * size
    b = rng.uniform(0.08, 0.22) * size
    margin = max(a, b) + 1
    r0 = rng.uniform(margin, size - margin)
    c0 = rng.uniform(margin, size - margin)
    theta = rng.uniform(0, np.pi)
    dr, dc = rr - r0, cc - c0
    u = dr * np.cos(theta) + dc * np.sin(theta)
    v = -dr * np.sin(theta) + dc * np.cos(theta)
    angle = np.arctan2(v / b, u / a)
    wobble = 1.0 + rng.uniform(0.0, 0.15) * np.sin(rng.integers(2, 5) * angle + rng.uniform(0, 2 * np.pi))
    return (u / a) ** 2 + (v / b) ** 2 <= wobble**2


def make_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Union of one or two random blobs with 1-2 components and 2-40% area."""
    while True:
        mask = _blob(size, rng)
        if rng.random() < 0.5:
            mask = mask | _blob(size, rng)
        frac = mask.mean()
        _, ncomp = label(mask, structure=EIGHT_CONNECTED)
        if 0.02 <= frac <= 0.40 and ncomp in (1, 2):
            return mask


def make_image(mask: np.ndarray, class_id: int, rng: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    rr, cc = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.2, 0.35)
    shading = rng.uniform(-0.08, 0.08) * rr + rng.uniform(-0.08, 0.08) * cc
    contrast = 0.22 + 0.04 * class_id + rng.uniform(0.0, 0.08)
    texture = gaussian_filter(rng.normal(0.0, 0.08, size=(h, w)), 1.0)
    img = base + shading + contrast * mask + texture + rng.normal(0.0, 0.07, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def make_heatmap(gt_mask, blur_radius: float = 2.0, noise_level: float = 0.3, seed=0) -> np.ndarray:
    """Saliency stand-in: clamp(blur(mask) + U(-noise, noise), 0, 1)."""
    if blur_radius < 0:
        raise ValueError("blur_radius must be >= 0")
    if not 0 <= noise_level < 1:
        raise ValueError("noise_level must be in [0, 1)")
    heat = np.asarray(gt_mask, dtype=np.float64)
    if heat.ndim != 2:
        raise ValueError(f"make_heatmap: expected a 2-D mask, got shape {heat.shape}")
    if blur_radius > 0:
        heat = gaussian_filter(heat, sigma=blur_radius, mode="constant")
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        heat = heat + rng.uniform(-noise_level, noise_level, size=heat.shape)
    return np.clip(heat, 0.0, 1.0)


def split_counts(n: int, fractions) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` over the three splits."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return dict(zip(SPLITS, counts))


def class_text_stubs(seed: int, class_count: int, dim: int = TEXT_DIM) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E57])
    return rng.normal(0.0, 1.0, size=(class_count, dim))


def _sample_arrays(seed, sample_id, size, class_count, blur_radius, noise_level):
    rng = np.random.default_rng([seed, sample_id])
    class_id = int(rng.integers(class_count))
    mask = make_mask(size, rng)
    image = make_image(mask, class_id, rng)
    heat = make_heatmap(mask, blur_radius, noise_level, seed=rng.integers(2**32))
    return class_id, _quantize(image), (mask * 255).astype(np.uint8), _quantize(heat)


def generate_dataset(
    out_dir,
    seed: int = 7,
    n: int = 625,
    size: int = 64,
    class_count: int = 3,
    split_fractions=(0.08, 0.72, 0.20),
    blur_radius: float = 2.0,
    noise_level: float = 0.3,
) -> DatasetManifest:
    if n < 10:
        raise ValueError("n must be >= 10")
    if not 32 <= size <= 256:
        raise ValueError("size must be in [32, 256]")
    if class_count < 1:
        raise ValueError("class_count must be >= 1")
    counts = split_counts(n, split_fractions)
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "heatmaps"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    perm = np.random.default_rng([seed, 0x5E]).permutation(n)
    split_of = np.empty(n, dtype=object)
    start = 0
    for name in SPLITS:
        split_of[perm[start : start + counts[name]]] = name
        start += counts[name]

    rows = []
    for i in range(n):
        class_id, img, mask, heat = _sample_arrays(seed, i, size, class_count, blur_radius, noise_level)
        names = (f"images/{i:06d}.pgm", f"masks/{i:06d}.pgm", f"heatmaps/{i:06d}.pgm")
        for rel, arr in zip(names, (img, mask, heat)):
            write_pgm(out / rel, arr)
        rows.append((i, class_id, str(split_of[i]), *names))

    manifest = DatasetManifest(
        seed=seed, height=size, width=size, n=n, class_count=class_count, split_counts=counts,
        text_stubs=class_text_stubs(seed, class_count), rows=rows, root=out,
        blur_radius=blur_radius, noise_level=noise_level,
    )
    write_manifest(manifest)
    log.info("wrote %d samples to %s (%s)", n, out, counts)
    return manifest


# ---------------------------------------------------------------- manifest


def write_manifest(m: DatasetManifest) -> None:
    lines = [
        MANIFEST_MAGIC,
        f"seed = {m.seed}",
        f"height = {m.height}",
        f"width = {m.width}",
        f"n = {m.n}",
        f"class_count = {m.class_count}",
        f"blur_radius = {m.blur_radius!r}",
        f"noise_level = {m.noise_level!r}",
        f"text_dim = {m.text_stubs.shape[1]}",
    ]
    lines += [f"split.{k} = {v}" for k, v in m.split_counts.items()]
    for c, vec in enumerate(m.text_stubs):
        lines.append(f"text_stub.{c} = " + " ".join(repr(float(x)) for x in vec))
    lines.append("[samples]")
    lines.append("id class split image mask heatmap")
    lines += [" ".join(str(x) for x in row) for row in m.rows]
    m.path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingFileError(f"missing manifest: {path}")
    text = path.read_text().splitlines()
    if not text or text[0] != MANIFEST_MAGIC:
        raise ManifestError(f"not a segpref manifest: {path}")
    try:
        sep = text.index("[samples]")
    except ValueError:
        raise ManifestError(f"manifest has no [samples] table: {path}") from None
    kv = {}
    for line in text[1:sep]:
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    try:
        class_count = int(kv["class_count"])
        stubs = np.array([[float(x) for x in kv[f"text_stub.{c}"].split()] for c in range(class_count)])
        rows = []
        for line in text[sep + 2 :]:
            if not line.strip():
                continue
            sid, cls, split, img, mask, heat = line.split()
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r} in {path}")
            rows.append((int(sid), int(cls), split, img, mask, heat))
        m = DatasetManifest(
            seed=int(kv["seed"]), height=int(kv["height"]), width=int(kv["width"]), n=int(kv["n"]),
            class_count=class_count, split_counts={s: int(kv[f"split.{s}"]) for s in SPLITS},
            text_stubs=stubs, rows=rows, root=path.parent,
            blur_radius=float(kv.get("blur_radius", "nan")), noise_level=float(kv.get("noise_level", "nan")),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    if len(rows) != m.n:
        raise ManifestError(f"manifest lists {len(rows)} samples but n = {m.n}")
    return m


def load_dataset(manifest_path) -> Dataset:
    m = read_manifest(manifest_path)
    samples = []
    for sid, cls, split, img, mask, heat in m.rows:
        arrays = []
        for rel in (img, mask, heat):
            arr = read_pgm(m.root / rel)
            if arr.shape != (m.height, m.width):
                raise DimensionMismatchError(
                    f"{m.root / rel}: shape {arr.shape} != manifest {(m.height, m.width)}"
                )
            arrays.append(arr)
        if not np.all((arrays[1] == 0) | (arrays[1] == 255)):
            raise CorruptPayloadError(f"mask {m.root / mask} is not binary")
        samples.append(
            SampleRecord(
                id=sid, image=arrays[0] / 255.0, gt_mask=arrays[1] == 255, heatmap=arrays[2] / 255.0,
                class_id=cls, text_stub=m.text_stubs[cls].copy(), split=split,
            )
        )
    return Dataset(m, samples)


def corpus_hash(root) -> str:
    """SHA-256 over every file of the corpus, in sorted relative-path order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def connected_count(mask) -> int:
    return int(label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)[1])
