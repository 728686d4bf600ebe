"""Toy prompt-conditioned segmenter: conv encoder, prompt encoder, conv decoder.

Resolution flow for an H x W image with embedding width d::

    image (1, H, W) -> enc1 s2 -> enc2 s2 -> enc3 -> features (d, H/4, W/4)
    features + prompt embedding (broadcast over space) [+ mask feedback]
        -> dec1 -> up2 -> dec2 -> up2 -> dec3 -> head -> sigmoid -> (1, H, W)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompts import PromptSet

PROMPT_TYPES = ("point", "box_tl", "box_br", "text")
CKPT_MAGIC = b"SEGPREF-CKPT\x00"
CKPT_VERSION = 1
LL_EPS = 1e-6


@dataclass(frozen=True)
class SegmenterConfig:
    width: int = 32
    enc_channels: int = 16
    dec_channels: tuple[int, int] = (16, 8)
    feedback_channels: int = 8
    pe_freqs: int = 4
    text_dim: int = 16
    mask_feedback: bool = False


GROUPS = ("encoder", "prompt", "decoder")


@dataclass
class PolicyParams:
    config: SegmenterConfig
    tensors: dict[str, Tensor]
    frozen: bool = False

    def group(self, name: str) -> dict[str, Tensor]:
        prefix = name + "."
        return {k: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def copy(self, frozen: bool | None = None) -> "PolicyParams":
        new = PolicyParams(self.config, {k: Tensor(t.data.copy(), t.requires_grad, k) for k, t in self.tensors.items()},
                           self.frozen if frozen is None else frozen)
        new.set_trainable(None if not new.frozen else ())
        return new

    def set_trainable(self, groups=None) -> None:
        """Mark only ``groups`` (all when None) as requiring gradients."""
        groups = GROUPS if groups is None else tuple(groups)
        for k, t in self.tensors.items():
            t.requires_grad = (not self.frozen) and k.split(".", 1)[0] in groups
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def equal(self, other: "PolicyParams", group: str | None = None) -> bool:
        keys = self.tensors if group is None else self.group(group)
        return all(np.array_equal(self.tensors[k].data, other.tensors[k].data) for k in keys)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: SegmenterConfig = SegmenterConfig(), seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng([seed, 0x5E6])
    d = config.width
    e = config.enc_channels
    d1, d2 = config.dec_channels
    fb = config.feedback_channels
    pe_dim = 4 * config.pe_freqs
    shapes: dict[str, tuple[tuple[int, ...], int]] = {
        "encoder.enc1.w": ((e, 1, 3, 3), 9),
        "encoder.enc2.w": ((d, e, 3, 3), e * 9),
        "encoder.enc3.w": ((d, d, 3, 3), d * 9),
        "prompt.pos.w": ((d, pe_dim), pe_dim),
        "prompt.type": ((d, len(PROMPT_TYPES)), 1),
        "prompt.text.w": ((d, config.text_dim), config.text_dim),
        "prompt.out.w": ((d, d), d),
        "prompt.fb1.w": ((fb, 1, 3, 3), 9),
        "prompt.fb2.w": ((d, fb, 3, 3), fb * 9),
        "decoder.dec1.w": ((d1, d, 3, 3), d * 9),
        "decoder.dec2.w": ((d2, d1, 3, 3), d1 * 9),
        "decoder.dec3.w": ((d2, d2, 3, 3), d2 * 9),
        "decoder.head.w": ((1, d2, 3, 3), d2 * 9),
    }
    tensors = {}
    for name, (shape, fan_in) in shapes.items():
        scale = 0.5 if name == "prompt.type" else 1.0
        tensors[name] = Tensor(scale * _uniform(rng, shape, fan_in), True, name)
        if name.endswith(".w"):
            bias = name[:-2] + ".b"
            tensors[bias] = Tensor(np.zeros(shape[0]), True, bias)
    return PolicyParams(config, tensors)


# ---------------------------------------------------------------- forward


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return x


def encode_image(params: PolicyParams, images) -> Tensor:
    x = _as_batch(images)
    if x.shape[1] != 1 or x.shape[2] % 4 or x.shape[3] % 4:
        raise ad.ShapeError(f"encode_image: need (N, 1, H, W) with H, W divisible by 4, got {x.shape}")
    t = params.tensors
    h = ad.gelu(ad.conv2d(x - 0.5, t["encoder.enc1.w"], t["encoder.enc1.b"], stride=2))
    h = ad.gelu(ad.conv2d(h, t["encoder.enc2.w"], t["encoder.enc2.b"], stride=2))
    return ad.gelu(ad.conv2d(h, t["encoder.enc3.w"], t["encoder.enc3.b"]))


def positional_encoding(rows, cols, size: tuple[int, int], freqs: int) -> np.ndarray:
    """Sinusoidal features of pixel centres normalised to [0, 1]; shape (k, 4 * freqs)."""
    r = (np.asarray(rows, dtype=np.float64) + 0.5) / size[0]
    c = (np.asarray(cols, dtype=np.float64) + 0.5) / size[1]
    bands = np.pi * 2.0 ** np.arange(freqs)
    parts = [np.sin(r[:, None] * bands), np.cos(r[:, None] * bands),
             np.sin(c[:, None] * bands), np.cos(c[:, None] * bands)]
    return np.concatenate(parts, axis=1)


def _prompt_elements(prompts: PromptSet, image_size, cfg: SegmenterConfig):
    """Per-element (positional enc, type id, text vector) rows in a canonical order."""
    coords, types = [], []
    for b in sorted(prompts.boxes, key=lambda b: (b.r0, b.c0, b.r1, b.c1)):
        coords += [(b.r0, b.c0), (b.r1, b.c1)]
        types += [1, 2]
    for p in sorted(prompts.points, key=lambda p: (p.row, p.col)):
        coords.append((p.row, p.col))
        types.append(0)
    k = len(coords)
    pe = np.zeros((k + 1, 4 * cfg.pe_freqs))
    if k:
        rc = np.asarray(coords)
        pe[:k] = positional_encoding(rc[:, 0], rc[:, 1], image_size, cfg.pe_freqs)
    text = np.zeros((k + 1, cfg.text_dim))
    text[k] = np.asarray(prompts.text_stub, dtype=np.float64)
    onehot = np.zeros((k + 1, len(PROMPT_TYPES)))
    onehot[np.arange(k), types] = 1.0
    onehot[k, 3] = 1.0
    return pe, onehot, text


def encode_prompts(params: PolicyParams, prompts, image_size) -> Tensor:
    """Mean-pooled prompt embeddings, one row of width d per prompt set."""
    if isinstance(prompts, PromptSet):
        prompts = [prompts]
    if not prompts:
        raise ValueError("encode_prompts: empty prompt batch")
    cfg = params.config
    pes, hots, texts, counts = [], [], [], []
    for ps in prompts:
        if not ps.boxes and not ps.points:
            raise ValueError("encode_prompts: prompt set has no boxes or points")
        pe, hot, text = _prompt_elements(ps, image_size, cfg)
        pes.append(pe)
        hots.append(hot)
        texts.append(text)
        counts.append(len(pe))
    pool = np.zeros((len(prompts), sum(counts)))
    start = 0
    for i, c in enumerate(counts):
        pool[i, start : start + c] = 1.0 / c
        start += c
    t = params.tensors
    elems = (
        ad.linear(np.concatenate(pes), t["prompt.pos.w"], t["prompt.pos.b"])
        + ad.linear(np.concatenate(hots), t["prompt.type"])
        + ad.linear(np.concatenate(texts), t["prompt.text.w"], t["prompt.text.b"])
    )
    return ad.linear(ad.matmul(pool, elems), t["prompt.out.w"], t["prompt.out.b"])


def decode_mask(params: PolicyParams, features: Tensor, prompt_embedding: Tensor, prev_mask=None) -> Tensor:
    """Probability map of shape (N, 1, H, W)."""
    features = ad.as_tensor(features)
    emb = ad.as_tensor(prompt_embedding)
    n, d, fh, fw = features.shape
    if emb.shape != (n, d):
        raise ad.ShapeError(f"decode_mask: prompt embedding {emb.shape} does not match features {features.shape}")
    t = params.tensors
    x = features + ad.reshape(emb, (n, d, 1, 1))
    if prev_mask is not None:
        m = _as_batch(prev_mask)
        if m.shape != (n, 1, fh * 4, fw * 4):
            raise ad.ShapeError(f"decode_mask: prev_mask {m.shape} does not match features {features.shape}")
        fb = ad.gelu(ad.conv2d(m, t["prompt.fb1.w"], t["prompt.fb1.b"], stride=2))
        x = x + ad.conv2d(fb, t["prompt.fb2.w"], t["prompt.fb2.b"], stride=2)
    x = ad.upsample2x(ad.gelu(ad.conv2d(x, t["decoder.dec1.w"], t["decoder.dec1.b"])))
    x = ad.upsample2x(ad.gelu(ad.conv2d(x, t["decoder.dec2.w"], t["decoder.dec2.b"])))
    x = ad.gelu(ad.conv2d(x, t["decoder.dec3.w"], t["decoder.dec3.b"]))
    return ad.sigmoid(ad.conv2d(x, t["decoder.head.w"], t["decoder.head.b"]))


def forward(params: PolicyParams, images, prompts, prev_mask=None) -> Tensor:
    x = _as_batch(images)
    feats = encode_image(params, x)
    emb = encode_prompts(params, prompts, x.shape[2:])
    if prev_mask is None and params.config.mask_feedback:
        # two-pass refinement: the first pass's map is fed back through the mask path
        prev_mask = decode_mask(params, feats, emb).data
    return decode_mask(params, feats, emb, prev_mask)


def predict(params: PolicyParams, images, prompts, batch_size: int = 32) -> np.ndarray:
    """Probability maps (N, H, W) without recording gradients."""
    x = _as_batch(images)
    if isinstance(prompts, PromptSet):
        prompts = [prompts]
    out = []
    for s in range(0, len(x), batch_size):
        out.append(forward(params, x[s : s + batch_size], prompts[s : s + batch_size]).data[:, 0])
    return np.concatenate(out)


def log_likelihood(prob_map, mask, eps: float = LL_EPS) -> Tensor:
    """Mean per-pixel Bernoulli log-likelihood of ``mask`` under ``prob_map``.

    Pixel axes are the last two; leading axes broadcast between the two
    arguments, so a (N, 1, H, W) map against (N, 4, H, W) candidates gives
    (N, 4) log-likelihoods.
    """
    p = ad.clamp(ad.as_tensor(prob_map), eps, 1.0 - eps)
    y = np.asarray(mask, dtype=np.float64)
    if p.shape[-2:] != y.shape[-2:]:
        raise ad.ShapeError(f"log_likelihood: map {p.shape} and mask {y.shape} differ in pixel shape")
    ll = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return ad.mean(ll, axis=(-2, -1))


# ---------------------------------------------------------------- checkpoints


def _config_to_json(cfg: SegmenterConfig) -> dict:
    data = asdict(cfg)
    data["dec_channels"] = list(cfg.dec_channels)
    return data


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned container: magic, u32 header length, JSON header, raw little-endian float64 blobs."""
    names = sorted(arrays)
    meta = dict(header)
    meta["version"] = CKPT_VERSION
    meta["tensors"] = [{"name": k, "shape": list(arrays[k].shape)} for k in names]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"not a segpref checkpoint: {path}")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos : pos + hlen])
    pos += hlen
    if meta.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')} in {path}")
    arrays = {}
    for spec in meta["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise ValueError(f"checkpoint truncated at tensor {spec['name']}: {path}")
        arrays[spec["name"]] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(spec["shape"]).copy()
        pos += nbytes
    return meta, arrays


def save_checkpoint(path, params: PolicyParams, extra: dict | None = None) -> None:
    header = {"kind": "policy", "config": _config_to_json(params.config), "frozen": params.frozen}
    if extra:
        header["extra"] = extra
    save_arrays(path, header, params.state())


def load_checkpoint(path) -> PolicyParams:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    cfg_data = dict(meta["config"])
    cfg_data["dec_channels"] = tuple(cfg_data["dec_channels"])
    cfg = SegmenterConfig(**cfg_data)
    params = PolicyParams(cfg, {k: Tensor(v, True, k) for k, v in arrays.items()}, bool(meta["frozen"]))
    params.set_trainable(None if not params.frozen else ())
    return params
