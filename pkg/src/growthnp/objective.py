"""Training objective: cross-entropy plus soft Dice, plus a beta-weighted KL."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .model import GaussianLatent


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1e-4
    dice_smooth: float = 1e-5
    class_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if not self.dice_smooth > 0:
            raise ValueError(f"dice_smooth must be positive, got {self.dice_smooth}")


@dataclass
class LossBreakdown:
    cross_entropy: torch.Tensor
    dice: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "ce": float(self.cross_entropy.detach()),
            "dice": float(self.dice.detach()),
            "kl": float(self.kl.detach()),
            "total": float(self.total.detach()),
        }


def _check_labels(logits, labels):
    k = logits.shape[-3]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}], got range [{int(labels.min())}, {int(labels.max())}]")


def cross_entropy_loss(logits, labels, class_weights: Optional[Sequence[float]] = None, reduce: bool = True):
    """Mean negative log-softmax at the true class.

    ``logits`` is [..., K, H, W] and ``labels`` [..., H, W]. With
    ``reduce=False`` one value per image is returned.
    """
    _check_labels(logits, labels)
    logp = F.log_softmax(logits, dim=-3)
    nll = -logp.gather(-3, labels.long().unsqueeze(-3)).squeeze(-3)
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=logits.dtype)[labels.long()]
        nll = nll * w
    per_image = nll.flatten(-2).mean(-1)
    return per_image.mean() if reduce else per_image


def soft_dice_loss(logits, labels, smooth: float = 1e-5, reduce: bool = True):
    """1 - mean over foreground classes of the smoothed soft Dice, per image."""
    _check_labels(logits, labels)
    k = logits.shape[-3]
    p = torch.softmax(logits, dim=-3).flatten(-2)  # [..., K, HW]
    y = F.one_hot(labels.long(), k).to(logits.dtype).flatten(-3, -2).transpose(-1, -2)
    inter = (p * y).sum(-1)
    denom = p.sum(-1) + y.sum(-1)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    per_image = 1.0 - dice[..., 1:].mean(-1)
    return per_image.mean() if reduce else per_image


def gaussian_kl(q: GaussianLatent, p: GaussianLatent) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    var_ratio = (q.sigma / p.sigma) ** 2
    mean_term = ((q.mu - p.mu) / p.sigma) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio)).sum(-1)


def training_objective(
    logits,
    labels,
    posterior: GaussianLatent,
    prior: GaussianLatent,
    config: LossConfig = LossConfig(),
    z_source: str = "posterior",
) -> LossBreakdown:
    """Single-sample estimate of the objective over a target set.

    ``logits`` [B, M, K, H, W] must have been decoded from a posterior
    sample; reconstruction terms are averaged over the B*M target points and
    the KL is averaged over the batch.
    """
    if z_source != "posterior":
        raise ValueError("the reconstruction term must be computed from a posterior sample")
    ce = cross_entropy_loss(logits, labels, config.class_weights)
    dice = soft_dice_loss(logits, labels, config.dice_smooth)
    kl = gaussian_kl(posterior, prior).mean()
    return LossBreakdown(ce, dice, kl, ce + dice + config.beta * kl)
