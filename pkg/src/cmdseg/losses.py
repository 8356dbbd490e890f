"""Segmentation objectives and the overall training loss.

Per-modality segmentation loss is soft Dice plus inverse-frequency
weighted cross-entropy (unit coefficients). The overall loss is
seg_a + seg_b + (alpha/2) * kd + eta * l2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ParameterStore, KD_SETTINGS
from .tensor import Tensor

DICE_SMOOTH = 1e-5


def softmax_probs(logits: Tensor) -> Tensor:
    """Ordinary per-pixel softmax over the channel axis."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant, gradient-free
    e = (logits - shift).exp()
    return e / e.sum(axes=(1,), keepdims=True)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    n, h, w = labels.shape
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    oh = np.zeros((n, num_classes, h, w))
    nn, hh, ww = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    oh[nn, labels, hh, ww] = 1.0
    return oh


def dice_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Soft Dice with squared denominator and smoothing, averaged over classes."""
    labels = np.asarray(labels)
    n, c, h, w = probs.shape
    rowsum = probs.data.sum(axis=1)
    if np.max(np.abs(rowsum - 1.0)) > 1e-6:
        raise ValueError("probability rows must sum to 1 per pixel (apply softmax first)")
    g = Tensor(_one_hot(labels, c))
    inter = (probs * g).sum(axes=(0, 2, 3))
    psq = (probs * probs).sum(axes=(0, 2, 3))
    gsq = (g * g).sum(axes=(0, 2, 3))
    per_class = (inter * 2.0 + DICE_SMOOTH) / (psq + gsq + DICE_SMOOTH)
    return 1.0 - per_class.mean()


def class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-batch inverse-frequency weights, renormalized to mean 1 over present classes."""
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=num_classes).astype(np.float64)
    total = counts.sum()
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = total / (num_classes * counts[present])
    w[present] *= present.sum() / w[present].sum()
    return w


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-averaged -w_y * log softmax(logits)_y with inverse-frequency weights."""
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    zs = logits - shift
    logp = zs - zs.exp().sum(axes=(1,), keepdims=True).log()
    oh = _one_hot(labels, c)
    wts = class_weights(labels, c)
    wmap = wts[labels][:, None, :, :]  # (N,1,H,W), broadcast over channels
    picked = logp * Tensor(oh * wmap)
    return -picked.sum() * (1.0 / (n * h * w))


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (seg, dice, wce) with seg = dice + wce."""
    d = dice_loss(softmax_probs(logits), labels)
    ce = weighted_cross_entropy(logits, labels)
    return d + ce, d, ce


def l2_penalty(store: ParameterStore) -> Tensor:
    """Sum of squares over every trainable (kernels, biases, gamma, beta).

    Running statistics are not trainable and are excluded.
    """
    total: Tensor | None = None
    for _i, _tag, _name, t in store.trainables():
        sq = (t * t).sum()
        total = sq if total is None else total + sq
    return total if total is not None else Tensor(0.0)


def effective_alpha(setting: str, alpha: float) -> float:
    """Distillation weight is forced to 0 for settings without the KD loss."""
    return alpha if setting in KD_SETTINGS else 0.0


@dataclass
class LossBreakdown:
    seg_a: float
    seg_b: float
    kd: float
    l2: float
    total: float
    dice_a: float = float("nan")
    dice_b: float = float("nan")
    wce_a: float = float("nan")
    wce_b: float = float("nan")

    def recompute_total(self, alpha: float, eta: float) -> float:
        return self.seg_a + self.seg_b + 0.5 * alpha * self.kd + eta * self.l2


def total_loss(seg_a: Tensor, seg_b: Tensor, kd: Tensor, l2: Tensor,
               alpha: float, eta: float) -> tuple[Tensor, LossBreakdown]:
    """Assemble the overall objective. Returns the differentiable total plus
    a numeric breakdown satisfying total = seg_a + seg_b + (alpha/2) kd + eta l2."""
    if alpha < 0 or eta < 0:
        raise ValueError("loss weights must be non-negative")
    total = seg_a + seg_b
    if alpha > 0:
        total = total + kd * (0.5 * alpha)
    if eta > 0:
        total = total + l2 * eta
    breakdown = LossBreakdown(seg_a=seg_a.item(), seg_b=seg_b.item(), kd=kd.item(),
                              l2=l2.item(), total=total.item())
    return total, breakdown
