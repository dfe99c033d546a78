"""Frozen feature extractors backing perceptual scores, losses, and metrics.

Two backbones are available behind one interface:

* ``fixed``  - a VGG-style conv stack with deterministic seeded random
  weights. Needs no external assets, so it is the desk-scale default; the
  perceptual-distance formula on top of it is unchanged.
* ``vgg19``  - the real torchvision VGG-19, loaded from a local weights file
  (``SEMGUIDE_VGG19`` or an explicit path). Raises MissingAssetError when the
  weights are absent; nothing is downloaded.

All extractors are frozen: parameters never receive gradients.
"""

from __future__ import annotations

import os
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn


class MissingAssetError(FileNotFoundError):
    """A required pretrained weights file is not available locally."""


def _fill_deterministic(module: nn.Module, seed: int) -> None:
    """Re-initialize all parameters from a private generator (global RNG untouched)."""
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.ndim > 1:
                fan_in = param[0].numel()
                std = (2.0 / max(fan_in, 1)) ** 0.5
                param.copy_(torch.randn(param.shape, generator=gen) * std)
            else:
                param.zero_()


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def parameter_checksum(module: nn.Module) -> float:
    """Cheap content checksum over all parameters (order-stable)."""
    total = 0.0
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        total += float(param.detach().double().abs().sum())
    return total


class FixedFeatureExtractor(nn.Module):
    """VGG-style stack of conv/GELU blocks with average-pool downsampling.

    Returns one feature map per stage (taps), finest first. GELU and average
    pooling keep the forward map smooth, which the finite-difference gradient
    checks rely on.
    """

    def __init__(self, stages: int = 4, base_channels: int = 32, seed: int = 0):
        super().__init__()
        self.stages = stages
        blocks = []
        in_ch = 3
        ch = base_channels
        for _ in range(stages):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, padding=1),
                    nn.GELU(),
                    nn.Conv2d(ch, ch, 3, padding=1),
                    nn.GELU(),
                )
            )
            in_ch = ch
            ch *= 2
        self.blocks = nn.ModuleList(blocks)
        self.tap_channels = [base_channels * 2**i for i in range(stages)]
        _fill_deterministic(self, seed)
        freeze(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        # x: (B, 3, H, W) in [0, 1]; shift to [-1, 1] before the first conv
        x = x * 2.0 - 1.0
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            taps.append(x)
            if i < len(self.blocks) - 1 and min(x.shape[-2:]) >= 2:
                x = F.avg_pool2d(x, 2)
        return taps


class Vgg19Features(nn.Module):
    """Taps relu1_1 ... relu4_1 of a locally stored torchvision VGG-19."""

    TAP_LAYERS = (1, 6, 11, 20)  # indices just after relu1_1, 2_1, 3_1, 4_1

    def __init__(self, weights_path: str):
        super().__init__()
        if not weights_path or not os.path.isfile(weights_path):
            raise MissingAssetError(
                f"pretrained VGG-19 weights not found (looked at {weights_path!r}); "
                "set SEMGUIDE_VGG19 to a local vgg19 state_dict file"
            )
        from torchvision.models import vgg19

        model = vgg19(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        last = max(self.TAP_LAYERS)
        self.features = nn.Sequential(*list(model.features.children())[: last + 1])
        self.tap_channels = [64, 128, 256, 512]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        freeze(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.TAP_LAYERS:
                taps.append(x)
        return taps


def get_extractor(kind: str = "fixed", seed: int = 0, weights_path: str | None = None) -> nn.Module:
    """Build a frozen extractor. ``vgg19`` requires a local weights file."""
    if kind == "fixed":
        return FixedFeatureExtractor(seed=seed)
    if kind == "vgg19":
        path = weights_path or os.environ.get("SEMGUIDE_VGG19", "")
        return Vgg19Features(path)
    raise ValueError(f"unknown extractor kind: {kind!r}")


@lru_cache(maxsize=4)
def default_extractor(seed: int = 0) -> FixedFeatureExtractor:
    return FixedFeatureExtractor(seed=seed)


class PerceptualDistance(nn.Module):
    """Deep-feature distance in the LPIPS form.

    Per tap: unit-normalize along channels, square the difference, average
    over channels and space; sum tap contributions. Zero iff inputs match.
    """

    def __init__(self, extractor: nn.Module | None = None):
        super().__init__()
        self.extractor = extractor if extractor is not None else default_extractor()

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        # a, b: (B, 3, H, W) in [0, 1]
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = None
        for fa, fb in zip(self.extractor(a), self.extractor(b)):
            na = fa / (fa.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
            nb = fb / (fb.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
            term = (na - nb).pow(2).mean(dim=(1, 2, 3))
            total = term if total is None else total + term
        return total


class PooledEmbedder(nn.Module):
    """Global image embedding: conv stack, global average pool, linear head.

    Used for distribution-level features (Frechet metric). Frozen, seeded.
    """

    def __init__(self, dim: int = 2048, base_channels: int = 32, seed: int = 7):
        super().__init__()
        self.backbone = FixedFeatureExtractor(stages=4, base_channels=base_channels, seed=seed)
        self.head = nn.Linear(self.backbone.tap_channels[-1], dim)
        _fill_deterministic(self.head, seed + 1)
        with torch.no_grad():  # non-zero bias decorrelates coordinates
            gen = torch.Generator().manual_seed(seed + 2)
            self.head.bias.copy_(torch.randn(self.head.bias.shape, generator=gen) * 0.1)
        freeze(self)
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(x)[-1]
        pooled = feats.mean(dim=(2, 3))
        return self.head(pooled)


class RegionEmbedder(nn.Module):
    """L2-normalized embedding of an image crop for cosine similarity."""

    def __init__(self, dim: int = 512, input_size: int = 64, seed: int = 11):
        super().__init__()
        self.input_size = input_size
        self.backbone = FixedFeatureExtractor(stages=3, base_channels=32, seed=seed)
        self.head = nn.Linear(self.backbone.tap_channels[-1], dim)
        _fill_deterministic(self.head, seed + 1)
        freeze(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        pooled = self.backbone(x)[-1].mean(dim=(2, 3))
        emb = self.head(pooled)
        return emb / (emb.norm(dim=-1, keepdim=True) + 1e-12)
