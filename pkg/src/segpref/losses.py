"""Supervised segmentation losses and the preference-optimization family.

Every loss takes and returns :class:`~segpref.autodiff.Tensor` objects so that
gradients flow through the engine. Probability maps have pixel axes last;
any leading axes are treated as batch and averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-6


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1.0
    beta1: float = 1.0
    beta2: float = 0.5
    epsilon: float = EPS
    # use the reference likelihood of Y2 in the first term, as the formula was originally typeset
    printed_denominator: bool = False

    def __post_init__(self):
        if min(self.beta, self.beta1, self.beta2) <= 0:
            raise ValueError("DPO weights must be positive")
        if self.beta1 < self.beta2:
            raise ValueError(f"beta1 ({self.beta1}) must be >= beta2 ({self.beta2})")


@dataclass
class CandidateLogProbs:
    """Log-likelihoods of four candidates, ordered best to worst along the last axis."""

    lp_policy: Tensor
    lp_reference: np.ndarray

    def __post_init__(self):
        ref = np.asarray(self.lp_reference.data if isinstance(self.lp_reference, Tensor) else self.lp_reference)
        self.lp_reference = ref.astype(np.float64)
        self.lp_policy = ad.as_tensor(self.lp_policy)
        if self.lp_policy.shape[-1] != 4 or self.lp_reference.shape != self.lp_policy.shape:
            raise ValueError(
                f"expected matching (..., 4) log-probs, got {self.lp_policy.shape} and {self.lp_reference.shape}"
            )
        if not (np.all(np.isfinite(self.lp_policy.data)) and np.all(np.isfinite(self.lp_reference))):
            raise ValueError("candidate log-probs must be finite")


def _const(x) -> Tensor:
    """Strip any gradient record: reference quantities enter as constants."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _pixel_axes(t: Tensor) -> tuple[int, int]:
    return (t.data.ndim - 2, t.data.ndim - 1)


def log_sigmoid(z) -> Tensor:
    return ad.neg(ad.softplus(ad.neg(z)))


def focal_loss(prob, mask, gamma: float = 2.0, alpha: float = 0.25, eps: float = EPS) -> Tensor:
    if gamma < 0 or not 0 < alpha <= 1:
        raise ValueError(f"focal_loss: need gamma >= 0 and alpha in (0, 1], got {gamma}, {alpha}")
    p = ad.as_tensor(prob)
    y = np.asarray(mask, dtype=np.float64)
    p_t = ad.clamp(p * y + (1.0 - p) * (1.0 - y), eps, 1.0 - eps)
    ce = ad.neg(ad.log(p_t))
    if gamma != 0:
        ce = ad.pow_(1.0 - p_t, gamma) * ce
    return ad.mean(ce) * alpha


def dice_loss(prob, mask, smooth: float = 1.0) -> Tensor:
    if smooth <= 0:
        raise ValueError("dice_loss: smooth must be positive")
    p = ad.as_tensor(prob)
    y = np.asarray(mask, dtype=np.float64)
    axes = _pixel_axes(p)
    inter = ad.sum_(p * y, axis=axes)
    denom = ad.sum_(p, axis=axes) + (y.sum(axis=axes) + smooth)
    return ad.mean(1.0 - (inter * 2.0 + smooth) / denom)


def combo_loss(prob, mask, focal_weight: float = 20.0, dice_weight: float = 1.0, gamma: float = 2.0,
               alpha: float = 0.25, smooth: float = 1.0) -> Tensor:
    if focal_weight <= 0 or dice_weight <= 0:
        raise ValueError("combo_loss: weights must be positive")
    return focal_loss(prob, mask, gamma, alpha) * focal_weight + dice_loss(prob, mask, smooth) * dice_weight


def bt_preference_prob(reward_m, reward_l) -> float:
    """Bradley-Terry probability that the first item is preferred."""
    return float(expit(float(reward_m) - float(reward_l)))


def reward_mle_loss(pairs) -> Tensor:
    """Negative mean log-likelihood of observed preferences under Bradley-Terry.

    ``pairs`` is a sequence of (r_preferred, r_other); entries may be floats
    or scalar tensors (e.g. outputs of a reward model).
    """
    if len(pairs) == 0:
        raise ValueError("reward_mle_loss: no preference pairs")
    terms = [log_sigmoid(ad.as_tensor(rm) - ad.as_tensor(rl)) for rm, rl in pairs]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.neg(total) * (1.0 / len(terms))


def dpo_pair_loss(lp_policy_m, lp_policy_l, lp_ref_m, lp_ref_l, beta: float = 1.0) -> Tensor:
    if beta <= 0:
        raise ValueError("dpo_pair_loss: beta must be positive")
    ratio_m = ad.as_tensor(lp_policy_m) - _const(lp_ref_m)
    ratio_l = ad.as_tensor(lp_policy_l) - _const(lp_ref_l)
    return ad.mean(ad.neg(log_sigmoid(ratio_m * beta - ratio_l * beta)))


def dpo_quad_margin(clp: CandidateLogProbs, cfg: DpoConfig, pair_mask=None) -> Tensor:
    """Weighted log-ratio margin over four ordered candidates.

    ``pair_mask`` (shape (..., 2)) switches off the outer (Y1 vs Y4) and inner
    (Y2 vs Y3) comparisons, e.g. where the annotator scored both sides equally.
    """
    lp = clp.lp_policy
    ref = clp.lp_reference.copy()
    if cfg.printed_denominator:
        ref[..., 0] = ref[..., 1]
    delta = lp - ref
    weights = np.array([cfg.beta1, cfg.beta2, -cfg.beta2, -cfg.beta1])
    if pair_mask is not None:
        m = np.asarray(pair_mask, dtype=np.float64)
        if m.shape != lp.shape[:-1] + (2,):
            raise ValueError(f"pair_mask must have shape {lp.shape[:-1] + (2,)}, got {m.shape}")
        weights = weights * m[..., [0, 1, 1, 0]]
    return ad.sum_(delta * weights, axis=-1)


def dpo_quad_loss(clp: CandidateLogProbs, cfg: DpoConfig = DpoConfig(), pair_mask=None) -> Tensor:
    return ad.mean(ad.neg(log_sigmoid(dpo_quad_margin(clp, cfg, pair_mask))))
