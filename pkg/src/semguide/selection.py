"""Per-pixel candidate scoring and guidance compositing.

Two scoring heads run per candidate per level: a structural head over raw
inputs and fused features, and a perceptual head over frozen deep features.
Scores are averaged, refined coarse-to-fine via learnable blend weights, and
the full-resolution result drives either a hard thresholded argmax composite
(inference) or a temperature-softmax composite (training).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .candidates import CandidateCompletion
from .data import MaskedScene
from .features import default_extractor, freeze
from .validation import check_unit_interval

logger = logging.getLogger(__name__)

UNFILLED = -1  # chosen_index sentinel for pixels no candidate fills


@dataclass
class ScoreVolume:
    """Raw, refined, and full-resolution confidence maps.

    ``raw[l]`` and ``refined[l]`` are (B, P, H_l, W_l); refined level l mixes
    only levels >= l. ``final`` is (B, P, H, W) at image resolution.
    """

    raw: list[torch.Tensor]
    refined: list[torch.Tensor]
    betas: torch.Tensor  # (L-1,) in [0, 1]
    final: torch.Tensor


@dataclass
class GuidanceImage:
    """Composited guidance: RGB, filled flags, and per-pixel candidate index."""

    pixels: np.ndarray  # (H, W, 3) float32
    filled: np.ndarray  # (H, W) uint8, 1 = filled by a candidate
    chosen_index: np.ndarray  # (H, W) int32, UNFILLED where not filled


class StructureScoreNet(nn.Module):
    """Convolutional structural-plausibility head, shared across candidates
    and levels; a per-level 1x1 projection adapts the input width."""

    def __init__(self, level_channels: tuple[int, ...], hidden: int = 64):
        super().__init__()
        # inputs per level: fused C_l + candidate rgb+validity + scene rgb+mask
        self.proj = nn.ModuleList(
            nn.Conv2d(c + 8, hidden, kernel_size=1) for c in level_channels
        )
        self.trunk = nn.Sequential(
            nn.Conv2d(hidden, 64, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 1, 3, padding=1),
        )

    def forward(
        self, fused: torch.Tensor, cand: torch.Tensor, scene: torch.Tensor, level: int
    ) -> torch.Tensor:
        # fused (B, C_l, H, W); cand (B, 4, H, W); scene (B, 4, H, W)
        if fused.shape[-2:] != cand.shape[-2:] or fused.shape[-2:] != scene.shape[-2:]:
            raise ValueError("structure-score inputs disagree on spatial shape")
        x = torch.cat([fused, cand, scene], dim=1)
        x = self.proj[level](x)
        return torch.sigmoid(self.trunk(x))


class PerceptualScoreNet(nn.Module):
    """Perceptual-quality head over frozen deep features.

    The extractor embeds the candidate and scene RGB; only the small conv
    head on top of [fused, features] is trainable.
    """

    def __init__(self, level_channels: tuple[int, ...], extractor: nn.Module | None = None, hidden: int = 64):
        super().__init__()
        self.extractor = extractor if extractor is not None else default_extractor()
        freeze(self.extractor)
        feat_ch = self.extractor.tap_channels[0]
        self.proj = nn.ModuleList(
            nn.Conv2d(c + 2 * feat_ch, hidden, kernel_size=1) for c in level_channels
        )
        self.head = nn.Sequential(
            nn.Conv2d(hidden, 64, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 1, 3, padding=1),
        )

    def _embed(self, rgb: torch.Tensor) -> torch.Tensor:
        # finest extractor tap keeps the level's spatial resolution
        return self.extractor(rgb)[0]

    def forward(
        self, fused: torch.Tensor, cand: torch.Tensor, scene: torch.Tensor, level: int
    ) -> torch.Tensor:
        if fused.shape[-2:] != cand.shape[-2:] or fused.shape[-2:] != scene.shape[-2:]:
            raise ValueError("perceptual-score inputs disagree on spatial shape")
        fc = self._embed(cand[:, :3])
        fs = self._embed(scene[:, :3])
        x = torch.cat([fused, fc, fs], dim=1)
        x = self.proj[level](x)
        return torch.sigmoid(self.head(x))


def aggregate_scores(structural: torch.Tensor, perceptual: torch.Tensor) -> torch.Tensor:
    """Elementwise average of the two score maps."""
    if structural.shape != perceptual.shape:
        raise ValueError(
            f"score map shapes differ: {tuple(structural.shape)} vs {tuple(perceptual.shape)}"
        )
    return 0.5 * (structural + perceptual)


def blend_hierarchical(
    fine: torch.Tensor, coarse: torch.Tensor, beta: torch.Tensor | float
) -> torch.Tensor:
    """(1-beta) * fine + beta * upsample(coarse); coarse is at half resolution."""
    if isinstance(beta, float):
        check_unit_interval(beta, "beta")
    expected = (fine.shape[-2] // 2, fine.shape[-1] // 2)
    if tuple(coarse.shape[-2:]) != expected:
        raise ValueError(
            f"coarse map must be at half resolution {expected}, got {tuple(coarse.shape[-2:])}"
        )
    up = F.interpolate(coarse, size=fine.shape[-2:], mode="bilinear", align_corners=False)
    return (1.0 - beta) * fine + beta * up


class HierarchicalBlender(nn.Module):
    """Learnable per-level blend weights, sigmoid-bounded, initialized to 0.5."""

    def __init__(self, levels: int):
        super().__init__()
        if levels < 1:
            raise ValueError("need at least one level")
        self.levels = levels
        self.raw_betas = nn.Parameter(torch.zeros(max(levels - 1, 1)))

    @property
    def betas(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_betas)

    def refine(self, raw: list[torch.Tensor], resolution: int) -> ScoreVolume:
        """Recursive coarse-to-fine blending, then upsample to image resolution.

        ``raw`` holds (B, P, H_l, W_l) maps, finest first.
        """
        if len(raw) != self.levels:
            raise ValueError(f"expected {self.levels} levels, got {len(raw)}")
        refined: list[torch.Tensor | None] = [None] * self.levels
        refined[-1] = raw[-1]
        betas = self.betas
        for l in range(self.levels - 2, -1, -1):
            refined[l] = blend_hierarchical(raw[l], refined[l + 1], betas[l])
        final = F.interpolate(
            refined[0], size=(resolution, resolution), mode="bilinear", align_corners=False
        )
        return ScoreVolume(raw=raw, refined=list(refined), betas=betas, final=final)


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------


def soft_selection_weights(
    scores: torch.Tensor, validity: torch.Tensor, tau: float
) -> torch.Tensor:
    """Temperature softmax over valid candidates; zero where none is valid.

    scores, validity: (B, P, H, W). Differentiable in ``scores``.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    neg = torch.finfo(scores.dtype).min / 4
    logits = torch.where(validity > 0, scores / tau, torch.full_like(scores, neg))
    weights = torch.softmax(logits, dim=1)
    any_valid = (validity > 0).any(dim=1, keepdim=True)
    return weights * any_valid


def soft_composite(
    scores: torch.Tensor,
    cand_rgb: torch.Tensor,
    validity: torch.Tensor,
    scene_rgb: torch.Tensor,
    mask: torch.Tensor,
    tau: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable composite: softmax-weighted candidates inside the hole.

    scores/validity: (B, P, H, W); cand_rgb: (B, P, 3, H, W);
    scene_rgb: (B, 3, H, W); mask: (B, 1, H, W) with 1 = hole.
    Returns (pixels, weights).
    """
    weights = soft_selection_weights(scores, validity, tau)
    blended = (weights.unsqueeze(2) * cand_rgb).sum(dim=1)  # (B, 3, H, W)
    pixels = scene_rgb * (1.0 - mask) + blended * mask
    return pixels, weights


def compose_guidance(
    final_scores,
    candidates: list[CandidateCompletion],
    scene: MaskedScene,
    threshold: float = 0.5,
    mode: str = "hard",
    tau: float = 0.1,
) -> GuidanceImage:
    """Assemble the guidance image from full-resolution confidence maps.

    Hard mode picks, per hole pixel, the valid candidate with the highest
    score (ties to the lowest index); pixels whose best score falls below
    ``threshold``, or that no candidate covers, stay masked. Soft mode blends
    candidates with a temperature softmax (training relaxation). Visible
    pixels always come from the input image.
    """
    if not candidates:
        raise ValueError("no candidates to composite")
    check_unit_interval(threshold, "threshold")
    scores = np.asarray(
        final_scores.detach().cpu().numpy() if isinstance(final_scores, torch.Tensor) else final_scores,
        dtype=np.float32,
    )
    if scores.ndim != 3 or scores.shape[0] != len(candidates):
        raise ValueError(f"expected scores of shape (P, H, W), got {scores.shape}")
    if scores.shape[1:] != scene.mask.bits.shape:
        raise ValueError("score maps must be at full image resolution")

    mask = scene.mask.bits.astype(bool)
    validity = np.stack([c.validity for c in candidates]).astype(bool)  # (P, H, W)
    values = np.stack([c.values for c in candidates])  # (P, H, W, 3)

    if mode == "hard":
        masked_scores = np.where(validity, scores, -1.0)
        chosen = np.argmax(masked_scores, axis=0).astype(np.int32)  # first max wins
        best = np.take_along_axis(masked_scores, chosen[None], axis=0)[0]
        filled = mask & validity.any(axis=0) & (best >= threshold)
        pixels = scene.visible_rgb.copy()
        yy, xx = np.nonzero(filled)
        pixels[yy, xx] = values[chosen[yy, xx], yy, xx]
        chosen_out = np.where(filled, chosen, UNFILLED).astype(np.int32)
        return GuidanceImage(pixels=pixels, filled=filled.astype(np.uint8), chosen_index=chosen_out)

    if mode == "soft":
        scores_t = torch.from_numpy(scores)[None]
        validity_t = torch.from_numpy(validity.astype(np.float32))[None]
        cand_t = torch.from_numpy(values.transpose(0, 3, 1, 2))[None]
        scene_t = torch.from_numpy(scene.visible_rgb.transpose(2, 0, 1))[None]
        mask_t = torch.from_numpy(mask.astype(np.float32))[None, None]
        pixels_t, weights = soft_composite(scores_t, cand_t, validity_t, scene_t, mask_t, tau)
        filled = mask & validity.any(axis=0)
        chosen = weights[0].argmax(dim=0).numpy().astype(np.int32)
        chosen_out = np.where(filled, chosen, UNFILLED).astype(np.int32)
        return GuidanceImage(
            pixels=pixels_t[0].numpy().transpose(1, 2, 0),
            filled=filled.astype(np.uint8),
            chosen_index=chosen_out,
        )

    raise ValueError(f"unknown compositing mode: {mode!r}")


def downsample_rgb(rgb: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(rgb, size=(size, size), mode="bilinear", align_corners=False)


def downsample_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Binary map downsampling: a low-res pixel is set if it is majority-covered."""
    avg = F.interpolate(mask, size=(size, size), mode="bilinear", align_corners=False)
    return (avg > 0.5).to(mask.dtype)
