"""Loss terms: photometric motion loss, field smoothness, inverse consistency,
and the supervised segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, abs_mean, add, forward_diff, l1_mean, scale
from .transform import warp


@dataclass(frozen=True)
class MotionLossWeights:
    smooth: float = 1.0
    consist: float = 1.0

    def __post_init__(self):
        if self.smooth < 0 or self.consist < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SegLossConfig:
    """``alpha * (1 - soft Dice) + (1 - alpha) * cross-entropy``."""

    alpha: float = 0.5
    smooth: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def smoothness_psi(field: Tensor) -> Tensor:
    """Sum over axes of the mean absolute forward difference of every component.

    Each axis averages over its n-1 valid differences; an axis of extent 1
    contributes nothing.
    """
    field = field if isinstance(field, Tensor) else Tensor(field)
    terms = [abs_mean(forward_diff(field, axis)) for axis in (1, 2, 3) if field.shape[axis] > 1]
    if not terms:
        return Tensor(np.zeros((), dtype=field.dtype))
    return _sum(terms)


def consistency_sigma(phi_fwd: Tensor, phi_bwd: Tensor) -> Tensor:
    """Inverse-consistency residual, averaged over both orderings.

    Each ordering measures |phi_a + phi_b(p + phi_a(p))|, the displacement left
    after following one field and then the other; it is zero for exact inverses.
    """
    if phi_fwd.shape != phi_bwd.shape:
        raise ValueError(f"field extents differ: {phi_fwd.shape} vs {phi_bwd.shape}")
    a = abs_mean(add(phi_fwd, warp(phi_bwd, phi_fwd)))
    b = abs_mean(add(phi_bwd, warp(phi_fwd, phi_bwd)))
    return scale(add(a, b), 0.5)


def motion_loss(I_t: Tensor, I_adj: Tensor, phi_fwd: Tensor, phi_bwd: Tensor,
                weights: MotionLossWeights = MotionLossWeights()) -> Tensor:
    """Symmetric unsupervised registration loss.

    ``phi_fwd`` lives on the grid of ``I_t`` and pulls ``I_adj`` onto it;
    ``phi_bwd`` does the reverse.
    """
    if I_t.shape != I_adj.shape or phi_fwd.shape[1:] != I_t.shape[1:]:
        raise ValueError("image and field extents must match")
    photometric = add(l1_mean(warp(I_adj, phi_fwd), I_t), l1_mean(warp(I_t, phi_bwd), I_adj))
    terms = [photometric]
    if weights.smooth:
        psi = add(smoothness_psi(phi_fwd), smoothness_psi(phi_bwd))
        terms.append(scale(psi, 0.5 * weights.smooth))
    if weights.consist:
        terms.append(scale(consistency_sigma(phi_fwd, phi_bwd), weights.consist))
    return _sum(terms)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    return (np.arange(num_classes)[:, None, None, None] == labels[None]).astype(dtype)


def segmentation_loss(pred: Tensor, truth, cfg: SegLossConfig = SegLossConfig(),
                      eps: float = 1e-12) -> Tensor:
    """Soft-Dice (foreground classes) plus voxel-mean cross-entropy on probabilities."""
    probs = pred.value
    labels = np.asarray(getattr(truth, "data", truth))
    if probs.shape[1:] != labels.shape:
        raise ValueError(f"prediction {probs.shape} and labels {labels.shape} extents differ")
    num_classes = probs.shape[0]
    y = one_hot(labels, num_classes, probs.dtype)
    n = labels.size
    smooth = cfg.smooth

    fg = probs[1:]
    yf = y[1:]
    inter = (fg * yf).reshape(num_classes - 1, -1).sum(axis=1, dtype=np.float64)
    denom = (fg.reshape(num_classes - 1, -1).sum(axis=1, dtype=np.float64)
             + yf.reshape(num_classes - 1, -1).sum(axis=1, dtype=np.float64))
    dice = (2.0 * inter + smooth) / (denom + smooth)
    dice_term = 1.0 - dice.mean()

    p_true = np.maximum((probs * y).sum(axis=0), eps)
    ce = -np.log(p_true.astype(np.float64)).mean()
    value = cfg.alpha * dice_term + (1.0 - cfg.alpha) * ce

    def backward_fn(g):
        grad = np.zeros_like(probs)
        if cfg.alpha:
            k = num_classes - 1
            # d dice_c / d p_c = (2 y (denom + s) - (2 inter + s)) / (denom + s)^2
            coef_y = (2.0 / (denom + smooth))[:, None, None, None]
            coef_1 = ((2.0 * inter + smooth) / (denom + smooth) ** 2)[:, None, None, None]
            grad[1:] -= (cfg.alpha / k) * (coef_y * yf - coef_1).astype(probs.dtype)
        if cfg.alpha < 1.0:
            live = (probs * y).sum(axis=0) > eps
            grad -= ((1.0 - cfg.alpha) / n) * y * (live / p_true)[None].astype(probs.dtype)
        return (grad * g,)

    out = np.asarray(value, dtype=probs.dtype)
    return Tensor.from_op(out, (pred,), backward_fn, "segmentation_loss")
