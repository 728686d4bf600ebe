"""Two-stage training: supervised prompt fine-tuning, then preference alignment of the decoder."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import segmenter as seg
from .annotator import STRATEGIES, THRESHOLDS, flip_noise, generate_candidates, score_candidates
from .losses import CandidateLogProbs, DpoConfig, combo_loss, dpo_quad_loss
from .metrics import MetricReport, score_masks
from .prompts import BoundingBox, EmptyPromptError, PromptConfig, PromptSet, crf_refine, prompts_from_prob
from .segmenter import PolicyParams, SegmenterConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    annotated_fraction: float = 0.10
    unannotated_fraction: float = 0.10
    epochs_stage1: int = 15
    epochs_stage2: int = 30
    initial_lr: float = 1e-4
    lr_stage2: float | None = None  # None: same as initial_lr
    lr_halving_period: int = 10
    batch_size: int = 4
    seed: int = 0
    strategy: str = "ranking"
    dpo: DpoConfig = DpoConfig()
    flip_fraction: float = 0.0
    regenerate_candidates: bool = True
    thresholds: tuple[float, ...] = THRESHOLDS
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    prompt: PromptConfig = PromptConfig()
    model: SegmenterConfig = SegmenterConfig()
    sdc_tolerance: float = 1.0

    def __post_init__(self):
        fa, fu = self.annotated_fraction, self.unannotated_fraction
        if fa < 0 or fu < 0 or fa + fu > 1 + 1e-12:
            raise ValueError(f"fractions must be >= 0 with sum <= 1, got {fa} + {fu}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.initial_lr <= 0 or (self.lr_stage2 is not None and self.lr_stage2 <= 0):
            raise ValueError("learning rates must be positive")
        if self.lr_halving_period < 1 or self.batch_size < 1:
            raise ValueError("lr_halving_period and batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ValueError(f"flip_fraction must be in [0, 1], got {self.flip_fraction}")
        if self.sdc_tolerance < 0:
            raise ValueError("sdc_tolerance must be >= 0")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# "original" is the recipe as first described (lr 1e-4 in both stages); "desk" raises
# the learning rates so the small model makes enough progress in the same epoch
# budget. Stage 2 stays at 3e-4: at 1e-3 the rating strategy drifts and collapses.
PRESETS = {
    "original": {},
    "desk": {"initial_lr": 3e-4, "lr_stage2": 3e-4},
}


def preset(name: str = "desk", **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    nested = {"dpo": DpoConfig, "model": SegmenterConfig}
    for key, cls in nested.items():
        if key in data and isinstance(data[key], dict):
            sub = dict(data[key])
            if key == "model" and "dec_channels" in sub:
                sub["dec_channels"] = tuple(sub["dec_channels"])
            data[key] = cls(**sub)
    if "prompt" in data and isinstance(data["prompt"], dict):
        sub = dict(data["prompt"])
        from .prompts import CrfParams

        if isinstance(sub.get("crf"), dict):
            sub["crf"] = CrfParams(**sub["crf"])
        data["prompt"] = PromptConfig(**sub)
    if "thresholds" in data:
        data["thresholds"] = tuple(data["thresholds"])
    return TrainConfig(**data)


# ---------------------------------------------------------------- optimizer


def lr_at(epoch: int, initial_lr: float, period: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * 0.5 ** (epoch // period)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def save(self, path) -> None:
        arrays = {f"m/{k}": a for k, a in self.m.items()} | {f"v/{k}": a for k, a in self.v.items()}
        header = {"kind": "adam", "step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        seg.save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path) -> "OptimizerState":
        meta, arrays = seg.load_arrays(path)
        if meta.get("kind") != "adam":
            raise ValueError(f"{path} is not an optimizer state file")
        st = cls(step=meta["step"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        for k, a in arrays.items():
            kind, name = k.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = a
        return st


def optimizer_step(params: PolicyParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected adaptive-moment update of the named tensors, in place."""
    if params.frozen:
        raise RuntimeError("optimizer_step: policy is frozen")
    if lr <= 0:
        raise ValueError("optimizer_step: lr must be positive")
    for name, g in grads.items():
        if name not in params.tensors:
            raise KeyError(f"optimizer_step: unknown parameter {name!r}")
        if g.shape != params.tensors[name].shape:
            raise ad.ShapeError(f"optimizer_step: gradient {g.shape} vs parameter {params.tensors[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"optimizer_step: non-finite gradient for {name}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in sorted(grads):
        g = grads[name]
        p = params.tensors[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- prompts


_REFINED: dict[tuple, np.ndarray] = {}


def _refined(sample, cfg: PromptConfig) -> np.ndarray:
    key = (
        sample.id,
        hashlib.sha1(sample.heatmap.tobytes() + sample.image.tobytes()).hexdigest(),
        cfg.crf,
    )
    if key not in _REFINED:
        _REFINED[key] = crf_refine(sample.heatmap, sample.image, cfg.crf)
    return _REFINED[key]


def sample_prompts(sample, cfg: PromptConfig, seed: int) -> PromptSet:
    """Prompts for one sample; the CRF refinement is memoised per sample."""
    return prompts_from_prob(_refined(sample, cfg), sample.text_stub, cfg, seed=[seed, sample.id])


def full_frame_prompt(sample) -> PromptSet:
    h, w = sample.image.shape
    return PromptSet([BoundingBox(0, 0, h - 1, w - 1)], [], sample.text_stub.copy())


def prepare(samples, config: TrainConfig, fallback: bool = False):
    """Pair samples with prompts. Failed extractions are dropped (or given a full-frame box)."""
    kept, prompts, skipped = [], [], []
    for s in samples:
        try:
            ps = sample_prompts(s, config.prompt, config.seed)
        except EmptyPromptError:
            if not fallback:
                log.warning("sample %d: prompt extraction failed; skipped", s.id)
                skipped.append(s.id)
                continue
            ps = full_frame_prompt(s)
        kept.append(s)
        prompts.append(ps)
    return kept, prompts, skipped


def select_training(dataset, config: TrainConfig):
    """Annotated and unannotated subsets sized as fractions of the whole training pool."""
    ann = sorted(dataset.split("annotated-train"), key=lambda s: s.id)
    un = sorted(dataset.split("unannotated-train"), key=lambda s: s.id)
    pool = len(ann) + len(un)
    n_ann = int(round(config.annotated_fraction * pool))
    n_un = int(round(config.unannotated_fraction * pool))
    if n_ann > len(ann) or n_un > len(un):
        raise ValueError(
            f"requested {n_ann} annotated / {n_un} unannotated samples but the corpus has {len(ann)} / {len(un)}"
        )
    return ann[:n_ann], un[:n_un]


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    stage: str
    rows: list[dict] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    initial_loss: float | None = None

    def write_csv(self, path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as f:
            for k, v in sorted((header or {}).items()):
                f.write(f"# {k}={v}\n")
            f.write(f"# skipped={' '.join(map(str, self.skipped))}\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "lr", "loss", "val_dice"])
            for r in self.rows:
                vd = "" if r["val_dice"] is None else repr(r["val_dice"])
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["loss"]), vd])


def _grads_by_name(grads: dict[ad.Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for t, g in grads.items():
        out[t.name] = g
        t.grad = None
    return out


def _batches(n: int, batch_size: int, seed, epoch: int):
    order = np.random.default_rng([*seed, epoch]).permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples]).astype(np.float64)


def _mean_dice(policy, samples, prompts) -> float:
    prob = seg.predict(policy, _stack(samples, "image"), prompts)
    return score_masks([s.id for s in samples], [s.class_id for s in samples], prob >= 0.5,
                       [s.gt_mask for s in samples]).mean_dice


def stage1_loss(params: PolicyParams, images, prompts, masks, config: TrainConfig) -> ad.Tensor:
    prob = seg.forward(params, images, prompts)
    return combo_loss(prob, np.asarray(masks)[:, None], config.focal_weight, config.dice_weight,
                      config.focal_gamma, config.focal_alpha)


def train_stage1(config: TrainConfig, samples, val_samples=None, init: PolicyParams | None = None,
                 state: OptimizerState | None = None, start_epoch: int = 0):
    """Fine-tune every parameter group with the combo loss on annotated samples."""
    if not samples:
        raise ValueError("train_stage1: annotated split is empty")
    kept, prompts, skipped = prepare(samples, config)
    if not kept:
        raise ValueError("train_stage1: no annotated sample yielded prompts")
    val = prepare(val_samples, config, fallback=True)[:2] if val_samples else None
    params = init.copy(frozen=False) if init is not None else seg.init_params(config.model, seed=config.seed)
    params.set_trainable()
    state = state or OptimizerState()
    images, masks = _stack(kept, "image"), _stack(kept, "gt_mask")
    trace = TrainLog("stage1", skipped=skipped)
    trace.initial_loss = stage1_loss(params, images, prompts, masks, config).item()
    for epoch in range(start_epoch, config.epochs_stage1):
        lr = lr_at(epoch, config.initial_lr, config.lr_halving_period)
        total = 0.0
        for idx in _batches(len(kept), config.batch_size, (config.seed, 1), epoch):
            with ad.Tape() as tape:
                loss = stage1_loss(params, images[idx], [prompts[i] for i in idx], masks[idx], config)
            optimizer_step(params, _grads_by_name(ad.backward(tape, loss)), state, lr)
            total += loss.item() * len(idx)
        vd = _mean_dice(params, *val) if val else None
        trace.rows.append({"epoch": epoch, "lr": lr, "loss": total / len(kept), "val_dice": vd})
        log.info("stage1 epoch %d lr %.2e loss %.5f val_dice %s", epoch, lr, total / len(kept), vd)
    return params, trace, state


@dataclass
class AlignmentCache:
    """Frozen-encoder quantities for the unannotated samples, computed once."""

    samples: list
    prompts: list
    features: np.ndarray
    embeddings: np.ndarray
    ref_prob: np.ndarray  # (N, H, W) under the frozen reference
    skipped: list[int]


def build_alignment_cache(pi_fine: PolicyParams, samples, config: TrainConfig, batch_size: int = 32):
    kept, prompts, skipped = prepare(samples, config)
    if not kept:
        raise ValueError("align_stage2: no unannotated sample yielded prompts")
    images = _stack(kept, "image")
    feats, embs, probs = [], [], []
    for s in range(0, len(kept), batch_size):
        f = seg.encode_image(pi_fine, images[s : s + batch_size])
        e = seg.encode_prompts(pi_fine, prompts[s : s + batch_size], images.shape[1:])
        feats.append(f.data)
        embs.append(e.data)
        probs.append(seg.decode_mask(pi_fine, f, e).data[:, 0])
    return AlignmentCache(kept, prompts, np.concatenate(feats), np.concatenate(embs), np.concatenate(probs), skipped)


def rate_batch(prob_maps, samples, config: TrainConfig):
    sets = []
    for p, s in zip(prob_maps, samples):
        cs = score_candidates(generate_candidates(p, config.thresholds), s.gt_mask, config.strategy, config.thresholds)
        sets.append(flip_noise(cs, config.flip_fraction, seed=[config.seed, s.id, 0xF11B]))
    return sets


def preference_loss(prob: ad.Tensor, ref_prob, candidate_sets, config: TrainConfig) -> ad.Tensor:
    """Loss on a (B, 1, H, W) policy map given rated candidate sets and reference maps."""
    if config.strategy == "best":
        pseudo = np.stack([cs.candidates[cs.best] for cs in candidate_sets])[:, None]
        return combo_loss(prob, pseudo, config.focal_weight, config.dice_weight, config.focal_gamma, config.focal_alpha)
    ordered = np.stack([cs.ordered() for cs in candidate_sets])
    lp_policy = seg.log_likelihood(prob, ordered)
    lp_ref = seg.log_likelihood(np.asarray(ref_prob)[:, None], ordered).data
    return dpo_quad_loss(CandidateLogProbs(lp_policy, lp_ref), config.dpo, preference_mask(candidate_sets))


def preference_mask(candidate_sets) -> np.ndarray:
    """(B, 2) flags for the outer and inner comparisons; a tied score states no preference."""
    mask = np.empty((len(candidate_sets), 2))
    for i, cs in enumerate(candidate_sets):
        s = cs.score[cs.order]
        mask[i] = (s[0] != s[3], s[1] != s[2])
    return mask


def stage2_loss(psi: PolicyParams, features, embeddings, ref_prob, candidate_sets, config: TrainConfig) -> ad.Tensor:
    return preference_loss(seg.decode_mask(psi, features, embeddings), ref_prob, candidate_sets, config)


def align_stage2(pi_fine: PolicyParams, config: TrainConfig, samples, val_samples=None,
                 cache: AlignmentCache | None = None, init: PolicyParams | None = None,
                 state: OptimizerState | None = None, start_epoch: int = 0, audit=None):
    """Align a copy of ``pi_fine`` to the virtual annotator, updating decoder tensors only."""
    if not samples and cache is None:
        raise ValueError("align_stage2: unannotated split is empty")
    ref = pi_fine.copy(frozen=True)
    psi = (init if init is not None else pi_fine).copy(frozen=False)
    psi.set_trainable(["decoder"])
    cache = cache or build_alignment_cache(ref, samples, config)
    val = prepare(val_samples, config, fallback=True)[:2] if val_samples else None
    state = state or OptimizerState()
    lr0 = config.lr_stage2 if config.lr_stage2 is not None else config.initial_lr
    fixed = None
    if not config.regenerate_candidates:
        fixed = rate_batch(cache.ref_prob, cache.samples, config)
    trace = TrainLog("stage2", skipped=list(cache.skipped))
    n = len(cache.samples)
    for epoch in range(start_epoch, config.epochs_stage2):
        lr = lr_at(epoch, lr0, config.lr_halving_period)
        total = 0.0
        for idx in _batches(n, config.batch_size, (config.seed, 2), epoch):
            feats, embs = cache.features[idx], cache.embeddings[idx]
            with ad.Tape() as tape:
                prob = seg.decode_mask(psi, feats, embs)
                if fixed is None:
                    # candidates come from the policy being aligned, re-rated every epoch
                    sets = rate_batch(prob.data[:, 0], [cache.samples[i] for i in idx], config)
                else:
                    sets = [fixed[i] for i in idx]
                loss = preference_loss(prob, cache.ref_prob[idx], sets, config)
            if audit is not None:
                audit.extend((epoch, cache.samples[i].id, cs) for i, cs in zip(idx, sets))
            optimizer_step(psi, _grads_by_name(ad.backward(tape, loss)), state, lr)
            total += loss.item() * len(idx)
        vd = _mean_dice(psi, *val) if val else None
        trace.rows.append({"epoch": epoch, "lr": lr, "loss": total / n, "val_dice": vd})
        log.info("stage2 epoch %d lr %.2e loss %.5f val_dice %s", epoch, lr, total / n, vd)
    return psi, trace, state


# ---------------------------------------------------------------- evaluation


class OraclePolicy:
    """Debug policy whose probability map is the ground-truth mask."""

    def __call__(self, samples, prompts):
        return np.stack([s.gt_mask.astype(np.float64) for s in samples])


class ConstantPolicy:
    def __init__(self, value: float = 0.5):
        self.value = value

    def __call__(self, samples, prompts):
        return np.full((len(samples), *samples[0].image.shape), self.value)


def evaluate(policy, samples, config: TrainConfig = TrainConfig(), prompts=None) -> MetricReport:
    """Dice / IoU / surface Dice of maps thresholded at 0.5.

    Test samples whose prompt extraction fails are prompted with a full-frame box.
    """
    if not samples:
        raise ValueError("evaluate: split is empty")
    if prompts is None:
        samples, prompts, _ = prepare(samples, config, fallback=True)
    if isinstance(policy, PolicyParams):
        prob = seg.predict(policy, _stack(samples, "image"), prompts)
    else:
        prob = policy(samples, prompts)
    report = score_masks(
        [s.id for s in samples], [s.class_id for s in samples], prob >= 0.5, [s.gt_mask for s in samples],
        config.sdc_tolerance,
    )
    report.header["config_hash"] = config.hash()
    return report
