"""Training objectives: generalized Dice, cross-consistency, confidence.

All losses take per-pixel class probabilities of shape (N, C, H, W); the
supervised terms take integer label maps of shape (N, H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

GDL_EPS = 1e-6
LOG_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_cc: float = 0.3
    lambda_conf: float = 0.1
    rampup_epochs: int = 10

    def __post_init__(self):
        if self.lambda_cc < 0 or self.lambda_conf < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rampup_epochs < 0:
            raise ValueError("rampup_epochs must be non-negative")

    def ramp(self, epoch: int) -> float:
        if self.rampup_epochs == 0:
            return 1.0
        return min(1.0, max(epoch, 0) / self.rampup_epochs)

    def effective(self, epoch: int) -> tuple[float, float]:
        r = self.ramp(epoch)
        return self.lambda_cc * r, self.lambda_conf * r


def one_hot(labels: np.ndarray, num_classes: int, dtype=None) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) one-hot array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    eye = np.eye(num_classes, dtype=dtype or T.get_default_dtype())
    return np.moveaxis(eye[labels], -1, 1)


def generalized_dice_loss(probs: Tensor, reference: np.ndarray, eps: float = GDL_EPS) -> Tensor:
    """Generalized Dice loss with per-class weights 1 / (reference volume)^2.

    Class weights are computed from the reference in this batch and are
    treated as constants. ``eps`` smooths both numerator and denominator,
    so a perfect prediction scores exactly zero.
    """
    if probs.ndim != 4:
        raise ValueError(f"probs must be (N, C, H, W), got {probs.shape}")
    n, c = probs.shape[:2]
    if n == 0:
        raise ValueError("generalized_dice_loss on an empty batch")
    reference = np.asarray(reference)
    if reference.shape != (n,) + probs.shape[2:]:
        raise ValueError(f"reference shape {reference.shape} does not match probs {probs.shape}")
    r = one_hot(reference, c, dtype=probs.dtype)
    volume = r.sum(axis=(0, 2, 3))
    w = (1.0 / (volume * volume + eps)).astype(probs.dtype)
    wr = Tensor(r * w.reshape(1, c, 1, 1), dtype=probs.dtype)

    intersect = (probs * wr).sum()
    # sum_l w_l sum_n (r + p) = const + sum_l w_l sum_n p
    wsum_ref = float((w * volume).sum())
    wp = (probs * Tensor(w.reshape(1, c, 1, 1), dtype=probs.dtype)).sum()
    denom = wp + (wsum_ref + eps)
    return 1.0 - (2.0 * intersect + eps) / denom


def cross_consistency_loss(probs_strong: Tensor, probs_weak: Tensor) -> Tensor:
    """Mean squared difference between the two branches' probability maps."""
    if probs_strong.shape != probs_weak.shape:
        raise ValueError(f"cross_consistency_loss shape mismatch: {probs_strong.shape} vs {probs_weak.shape}")
    d = probs_strong - probs_weak
    return (d * d).mean()


def confidence_loss(probs: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Per-pixel Shannon entropy normalised by log C, averaged over pixels.

    Probabilities below ``eps`` are floored inside the log only, which
    keeps the value in [0, 1] and exactly 0 for one-hot inputs.
    """
    c = probs.shape[1]
    ent = -(probs * T.log(T.clip_min(probs, eps))).sum(axis=1)
    return ent.mean() * (1.0 / math.log(c))


@dataclass
class LossBreakdown:
    total: float
    gdl_strong: float
    gdl_weak: float
    cross_consistency: float
    confidence: float
    lambda_cc: float
    lambda_conf: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def phase2_total_loss(
    strong_logits_on_strong: Tensor,
    weak_logits_on_weak: Tensor,
    strong_probs_on_weak: Tensor | None,
    weak_probs_on_weak: Tensor | None,
    strong_labels: np.ndarray,
    weak_labels: np.ndarray,
    weights: LossWeights,
    epoch: int,
) -> tuple[Tensor, LossBreakdown]:
    """Mixed-supervision objective used while fine-tuning both decoders.

    ``weak_probs_on_weak`` may be omitted, in which case it is the softmax
    of ``weak_logits_on_weak``. ``epoch`` is zero-based and drives the ramp.
    """
    lam_cc, lam_conf = weights.effective(epoch)
    gdl_s = generalized_dice_loss(T.softmax_channels(strong_logits_on_strong), strong_labels)
    if weak_probs_on_weak is None:
        weak_probs_on_weak = T.softmax_channels(weak_logits_on_weak)
    gdl_w = generalized_dice_loss(weak_probs_on_weak, weak_labels)
    total = gdl_s + gdl_w

    cc_val = conf_val = 0.0
    if strong_probs_on_weak is not None:
        cc = cross_consistency_loss(strong_probs_on_weak, weak_probs_on_weak)
        conf = (confidence_loss(strong_probs_on_weak) + confidence_loss(weak_probs_on_weak)) * 0.5
        cc_val, conf_val = cc.item(), conf.item()
        if lam_cc:
            total = total + lam_cc * cc
        if lam_conf:
            total = total + lam_conf * conf
    elif lam_cc or lam_conf:
        raise ValueError("strong_probs_on_weak is required when unsupervised weights are non-zero")

    return total, LossBreakdown(
        total=total.item(),
        gdl_strong=gdl_s.item(),
        gdl_weak=gdl_w.item(),
        cross_consistency=cc_val,
        confidence=conf_val,
        lambda_cc=lam_cc,
        lambda_conf=lam_conf,
    )
