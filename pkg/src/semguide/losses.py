"""Training objectives: filled-region reconstruction, cross-level
consistency, and their convex combination."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .features import PerceptualDistance
from .validation import check_unit_interval

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    """Per-step loss terms; recon = l1 + perceptual + smooth,
    total = lambda * recon + (1 - lambda) * hier."""

    l1: float
    perceptual: float
    smooth: float
    hier: float
    lambda_: float

    @property
    def recon(self) -> float:
        return self.l1 + self.perceptual + self.smooth

    @property
    def total(self) -> float:
        return self.lambda_ * self.recon + (1.0 - self.lambda_) * self.hier

    def to_json(self) -> str:
        return json.dumps(
            {
                "l1": self.l1,
                "perceptual": self.perceptual,
                "smooth": self.smooth,
                "recon": self.recon,
                "hier": self.hier,
                "total": self.total,
                "lambda": self.lambda_,
            }
        )


def masked_l1(guide: torch.Tensor, gt: torch.Tensor, filled: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over filled pixels only.

    guide, gt: (B, 3, H, W); filled: (B, 1, H, W).
    """
    weight = filled.sum() * guide.shape[1]
    if weight.item() == 0:
        return guide.sum() * 0.0
    return (torch.abs(guide - gt) * filled).sum() / weight


def masked_perceptual(
    guide: torch.Tensor,
    gt: torch.Tensor,
    filled: torch.Tensor,
    perceptual: PerceptualDistance,
) -> torch.Tensor:
    """Deep-feature L1 between full images, masked to the filled region at
    each feature resolution."""
    feats_g = perceptual.extractor(guide)
    feats_t = perceptual.extractor(gt)
    total = guide.sum() * 0.0
    for fg, ft in zip(feats_g, feats_t):
        m = F.interpolate(filled, size=fg.shape[-2:], mode="bilinear", align_corners=False)
        weight = m.sum() * fg.shape[1]
        if weight.item() == 0:
            continue
        total = total + (torch.abs(fg - ft) * m).sum() / weight
    return total / len(feats_g)


def selection_smoothness(weights: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Total variation of the selection-weight maps inside the hole.

    Penalizes abrupt candidate switching between neighbors.
    weights: (B, P, H, W); mask: (B, 1, H, W).
    """
    m = mask
    dx = torch.abs(weights[..., :, 1:] - weights[..., :, :-1]) * (m[..., :, 1:] * m[..., :, :-1])
    dy = torch.abs(weights[..., 1:, :] - weights[..., :-1, :]) * (m[..., 1:, :] * m[..., :-1, :])
    denom = mask.sum() * weights.shape[1]
    if denom.item() == 0:
        return weights.sum() * 0.0
    return (dx.sum() + dy.sum()) / denom


def recon_loss(
    guide: torch.Tensor,
    gt: torch.Tensor,
    filled: torch.Tensor,
    weights: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    perceptual: PerceptualDistance | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction terms (l1, perceptual, smooth) on the filled region.

    guide, gt: (B, 3, H, W); filled: (B, 1, H, W); weights are the soft
    selection maps (B, P, H, W) used for the smoothness term.
    """
    if guide.shape != gt.shape:
        raise ValueError(f"guide/gt shape mismatch: {tuple(guide.shape)} vs {tuple(gt.shape)}")
    if filled.sum().item() == 0:
        logger.warning("recon loss over an empty filled region; all terms are zero")
        zero = guide.sum() * 0.0
        return zero, zero.clone(), zero.clone()
    if perceptual is None:
        perceptual = PerceptualDistance()
    l1 = masked_l1(guide, gt, filled)
    perc = masked_perceptual(guide, gt, filled, perceptual)
    if weights is None or mask is None:
        smooth = guide.sum() * 0.0
    else:
        smooth = selection_smoothness(weights, mask)
    return l1, perc, smooth


def hier_loss(levels: list[torch.Tensor]) -> torch.Tensor:
    """Cross-scale consistency: each coarser image against the bilinearly
    downsampled next-finer one, averaged per pixel and over level pairs.

    ``levels`` is ordered finest first; level k+1 is at half the resolution
    of level k.
    """
    if len(levels) < 2:
        logger.warning("hierarchical loss needs >= 2 levels; returning zero")
        return levels[0].sum() * 0.0 if levels else torch.tensor(0.0)
    total = levels[0].sum() * 0.0
    for k in range(1, len(levels)):
        finer, coarser = levels[k - 1], levels[k]
        if tuple(coarser.shape[-2:]) != (finer.shape[-2] // 2, finer.shape[-1] // 2):
            raise ValueError(
                f"level {k} must be at half the resolution of level {k - 1}: "
                f"{tuple(coarser.shape[-2:])} vs {tuple(finer.shape[-2:])}"
            )
        down = F.interpolate(finer, size=coarser.shape[-2:], mode="bilinear", align_corners=False)
        total = total + torch.abs(coarser - down).mean()
    return total / (len(levels) - 1)


def total_loss(recon: torch.Tensor | float, hier: torch.Tensor | float, lambda_: float):
    """Convex combination lambda * recon + (1 - lambda) * hier."""
    check_unit_interval(lambda_, "lambda_")
    return lambda_ * recon + (1.0 - lambda_) * hier
