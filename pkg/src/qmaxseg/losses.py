"""Supervision losses for scribble-annotated training.

Three parts: partial cross-entropy on annotated pixels (both heads), a Dice
loss against dynamically mixed hard pseudo-labels, and mean squared error on
the edge map. The weighted sum of the three is the training objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError

DICE_EPS = 1e-5


@dataclass
class ScribbleMap:
    """Sparse labels: every entry is a class id or unknown_code."""

    labels: np.ndarray
    unknown_code: int

    def validate(self, num_classes):
        ids = np.unique(self.labels)
        bad = ids[(ids != self.unknown_code) & ((ids < 0) | (ids >= num_classes))]
        if bad.size:
            raise DataError(
                f"scribble contains class ids {bad.tolist()} outside "
                f"[0, {num_classes}) and unknown code {self.unknown_code}")

    def annotated_fraction(self) -> float:
        return float((self.labels != self.unknown_code).mean())


@dataclass
class LossWeights:
    """Weights of the three loss parts (annotated / pseudo / edge)."""

    ssl: float = 1.0
    psl: float = 0.5
    esl: float = 0.2

    def __post_init__(self):
        if min(self.ssl, self.psl, self.esl) < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {self}")


def _batched(logits, labels):
    if logits.ndim == 3:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
    return logits, labels


def partial_ce(logits, labels, unknown_code):
    """Cross-entropy averaged over annotated pixels only.

    logits: (C, H, W) or (B, C, H, W); labels: matching int map where
    unknown_code marks unannotated pixels. Returns 0 when nothing is
    annotated.
    """
    logits, labels = _batched(logits, labels)
    num_classes = logits.shape[1]
    mask = labels != unknown_code
    if not bool(mask.any()):
        return logits.sum() * 0.0
    picked = labels[mask]
    if int(picked.max()) >= num_classes or int(picked.min()) < 0:
        raise DataError(
            f"annotated class id out of range [0, {num_classes})")
    logp = F.log_softmax(logits, dim=1)
    per_pixel = logp.permute(0, 2, 3, 1)[mask]
    chosen = per_pixel.gather(1, picked.long().unsqueeze(1)).squeeze(1)
    return -chosen.mean()


def dice_loss(probs, target, eps=DICE_EPS):
    """Soft Dice: mean over classes of 1 - (2*sum(p*g)+eps)/(sum p+sum g+eps).

    probs and target: (C, H, W) or (B, C, H, W), target one-hot encoded.
    """
    if probs.shape != target.shape:
        raise ConfigError(
            f"probs shape {tuple(probs.shape)} != target shape {tuple(target.shape)}")
    if probs.ndim == 3:
        probs, target = probs.unsqueeze(0), target.unsqueeze(0)
    inter = (probs * target).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def mix_pseudo_label(y1, y2, alpha):
    """Hard labels from the per-pixel argmax of alpha*y1 + (1-alpha)*y2.

    y1, y2 are softmax outputs; the result carries no gradient.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"mixing weight must lie in (0, 1), got {alpha}")
    if y1.shape != y2.shape:
        raise ConfigError(f"head shapes differ: {tuple(y1.shape)} vs {tuple(y2.shape)}")
    with torch.no_grad():
        return (alpha * y1 + (1.0 - alpha) * y2).argmax(dim=-3)


def one_hot(labels, num_classes, dtype=torch.float32):
    """(..., H, W) int labels -> (..., C, H, W) one-hot planes."""
    oh = F.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, -3).to(dtype)


def psl_loss(y1, y2, alpha, include_background=True):
    """Pseudo-label supervision: mean of the two heads' Dice losses against
    the mixed hard label."""
    num_classes = y1.shape[-3]
    target = one_hot(mix_pseudo_label(y1.detach(), y2.detach(), alpha),
                     num_classes, dtype=y1.dtype)
    if not include_background:
        sel = slice(1, None)
        y1, y2, target = y1[..., sel, :, :], y2[..., sel, :, :], target[..., sel, :, :]
    return 0.5 * (dice_loss(y1, target) + dice_loss(y2, target))


def esl_loss(edge_pred, edge_gt):
    """Mean squared error between predicted and ground-truth edge maps."""
    if edge_pred.shape != edge_gt.shape:
        raise ConfigError(
            f"edge shapes differ: {tuple(edge_pred.shape)} vs {tuple(edge_gt.shape)}")
    return F.mse_loss(edge_pred, edge_gt)


def ssl_loss(labels, y1_logits, y2_logits, unknown_code):
    """Scribble supervision: mean of the two heads' partial cross-entropies."""
    return 0.5 * (partial_ce(y1_logits, labels, unknown_code)
                  + partial_ce(y2_logits, labels, unknown_code))


def total_loss(ssl, psl, esl, weights: LossWeights):
    """Weighted sum of the three components."""
    return weights.ssl * ssl + weights.psl * psl + weights.esl * esl
