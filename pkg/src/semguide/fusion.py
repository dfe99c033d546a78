"""Dual hierarchical encoders and the cross-attention fusion decoder.

Both encoders share one architecture (windowed self-attention blocks with
patch merging between stages) but not weights: one consumes the masked image
plus its mask channel, the other consumes each candidate plus its validity
channel. The decoder fuses coarse-to-fine: at the coarsest level the context
feature queries the pooled candidate tokens; at finer levels the upsampled
fused map plus the context skip forms the query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .candidates import CandidateCompletion
from .data import MaskedScene


@dataclass
class FusionConfig:
    """Geometry and width settings for the encoders and decoder."""

    resolution: int = 256
    patch_size: int = 4
    levels: int = 4
    channels: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 8
    depths: tuple[int, ...] = (2, 2, 2, 2)
    mlp_ratio: float = 2.0
    candidate_count: int = 3

    def __post_init__(self) -> None:
        if len(self.channels) != self.levels or len(self.heads) != self.levels:
            raise ValueError("channels and heads must have one entry per level")
        if len(self.depths) != self.levels:
            raise ValueError("depths must have one entry per level")
        if self.resolution % (self.patch_size * 2 ** (self.levels - 1)) != 0:
            raise ValueError(
                f"resolution {self.resolution} not divisible by "
                f"patch_size * 2^(levels-1) = {self.patch_size * 2 ** (self.levels - 1)}"
            )
        for l in range(self.levels):
            extent = self.level_extent(l)
            win = min(self.window_size, extent)
            if extent % win != 0:
                raise ValueError(
                    f"window size {self.window_size} does not tile level {l + 1} "
                    f"extent {extent}"
                )
            if self.channels[l] % self.heads[l] != 0:
                raise ValueError(f"channels[{l}] must be divisible by heads[{l}]")

    def level_extent(self, level_index: int) -> int:
        """Spatial side length at 0-based level index (0 = finest)."""
        return self.resolution // (self.patch_size * 2**level_index)

    def level_window(self, level_index: int) -> int:
        return min(self.window_size, self.level_extent(level_index))


@dataclass
class FeaturePyramid:
    """Per-level feature maps, finest first; each (B, C_l, H_l, W_l)."""

    levels: list[torch.Tensor]
    source: str = "context"  # context | semantic | fused

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape) for t in self.levels]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    # x: (B, H, W, C) -> (B*nW, window*window, C)
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    # windows: (B*nW, window*window, C) -> (B, H, W, C)
    B = windows.shape[0] // ((H // window) * (W // window))
    x = windows.view(B, H // window, W // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with relative position bias."""

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        self.relative_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        flat = torch.flatten(coords, 1)
        rel = flat[:, :, None] - flat[:, None, :]
        rel = rel.permute(1, 2, 0).contiguous()
        rel[:, :, 0] += window - 1
        rel[:, :, 1] += window - 1
        rel[:, :, 0] *= 2 * window - 1
        self.register_buffer("relative_index", rel.sum(-1))

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B_, N, C) with N = window*window
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_bias[self.relative_index.view(-1)].view(N, N, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if attn_mask is not None:
            nW = attn_mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.heads, N, N) + attn_mask[None, :, None]
            attn = attn.view(-1, self.heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm windowed attention block; odd blocks use shifted windows."""

    def __init__(self, dim: int, heads: int, extent: int, window: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.extent = extent
        self.window = window
        self.shift = shift if window < extent else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

        if self.shift > 0:
            self.register_buffer("attn_mask", self._shift_mask(extent, window, self.shift))
        else:
            self.attn_mask = None

    @staticmethod
    def _shift_mask(extent: int, window: int, shift: int) -> torch.Tensor:
        img_mask = torch.zeros(1, extent, extent, 1)
        slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        count = 0
        for h in slices:
            for w in slices:
                img_mask[:, h, w, :] = count
                count += 1
        windows = window_partition(img_mask, window).squeeze(-1)
        diff = windows.unsqueeze(1) - windows.unsqueeze(2)
        return diff.masked_fill(diff != 0, -100.0).masked_fill(diff == 0, 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        B, H, W, C = x.shape
        shortcut = x
        x = self.norm1(x)
        if self.shift > 0:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = window_partition(x, self.window)
        windows = self.attn(windows, self.attn_mask)
        x = window_reverse(windows, self.window, H, W)
        if self.shift > 0:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighborhood concat followed by a linear reduction to 2C."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C) -> (B, H/2, W/2, out_dim)
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class HierarchicalEncoder(nn.Module):
    """Patch embedding plus staged windowed-attention blocks with merging.

    Emits one (B, C_l, H_l, W_l) map per level, finest first.
    """

    def __init__(self, config: FusionConfig, in_channels: int = 4, source: str = "context"):
        super().__init__()
        self.config = config
        self.source = source
        self.patch_embed = nn.Conv2d(
            in_channels, config.channels[0], kernel_size=config.patch_size, stride=config.patch_size
        )
        self.embed_norm = nn.LayerNorm(config.channels[0])

        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for l in range(config.levels):
            extent = config.level_extent(l)
            window = config.level_window(l)
            blocks = []
            for b in range(config.depths[l]):
                shift = 0 if b % 2 == 0 else window // 2
                blocks.append(
                    SwinBlock(config.channels[l], config.heads[l], extent, window, shift, config.mlp_ratio)
                )
            self.stages.append(nn.Sequential(*blocks))
            if l < config.levels - 1:
                self.merges.append(PatchMerging(config.channels[l], config.channels[l + 1]))

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        # x: (B, in_channels, H, W)
        if x.shape[-1] != self.config.resolution:
            raise ValueError(
                f"input resolution {x.shape[-1]} does not match configured {self.config.resolution}"
            )
        x = self.patch_embed(x).permute(0, 2, 3, 1)  # (B, H1, W1, C1)
        x = self.embed_norm(x)
        levels = []
        for l, stage in enumerate(self.stages):
            x = stage(x)
            levels.append(x.permute(0, 3, 1, 2).contiguous())
            if l < len(self.merges):
                x = self.merges[l](x)
        return FeaturePyramid(levels=levels, source=self.source)


class CrossAttentionBlock(nn.Module):
    """Query tokens attend over a pooled candidate-token bank.

    ``attention_enabled`` is a test hook: when False the attention output is
    zeroed, leaving only the query-side residual path.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.attention_enabled = True

    def forward(self, query: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        # query: (B, Nq, C); tokens: (B, Nk, C) pooled over candidates
        B, Nq, C = query.shape
        h = self.heads
        if self.attention_enabled:
            q = self.to_q(self.norm_q(query)).view(B, Nq, h, C // h).transpose(1, 2)
            kv = self.norm_kv(tokens)
            k = self.to_k(kv).view(B, -1, h, C // h).transpose(1, 2)
            v = self.to_v(kv).view(B, -1, h, C // h).transpose(1, 2)
            attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
            out = (attn @ v).transpose(1, 2).reshape(B, Nq, C)
            query = query + self.proj(out)
        return query + self.mlp(self.norm2(query))


class FusionDecoder(nn.Module):
    """Coarse-to-fine cross-attention fusion with context skip connections."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(config.channels[l], config.heads[l], config.mlp_ratio)
            for l in range(config.levels)
        )
        # channel projections for the upsampled coarser fused map
        self.up_proj = nn.ModuleList(
            nn.Conv2d(config.channels[l + 1], config.channels[l], kernel_size=1)
            for l in range(config.levels - 1)
        )

    def forward(self, ctx: FeaturePyramid, sems: list[FeaturePyramid]) -> FeaturePyramid:
        if not sems:
            raise ValueError("at least one semantic pyramid is required")
        for sem in sems:
            if sem.shapes() != ctx.shapes():
                raise ValueError(
                    f"pyramid geometry mismatch: context {ctx.shapes()} vs semantic {sem.shapes()}"
                )
        L = self.config.levels
        fused_levels: list[torch.Tensor | None] = [None] * L
        fused = None
        for l in range(L - 1, -1, -1):
            B, C, H, W = ctx.levels[l].shape
            if l == L - 1:
                query_map = ctx.levels[l]
            else:
                up = F.interpolate(fused, size=(H, W), mode="bilinear", align_corners=False)
                query_map = self.up_proj[l](up) + ctx.levels[l]
            query = query_map.flatten(2).transpose(1, 2)  # (B, H*W, C)
            # candidate tokens pooled along the token axis, order-free
            tokens = torch.cat([s.levels[l].flatten(2).transpose(1, 2) for s in sems], dim=1)
            out = self.blocks[l](query, tokens)
            fused = out.transpose(1, 2).reshape(B, C, H, W)
            fused_levels[l] = fused
        return FeaturePyramid(levels=list(fused_levels), source="fused")


def scene_to_tensor(scene: MaskedScene) -> torch.Tensor:
    """(1, 4, H, W) context input: hole-zeroed RGB + mask channel."""
    return torch.from_numpy(scene.masked_pixels.transpose(2, 0, 1)).float()[None]


def candidate_to_tensor(candidate: CandidateCompletion) -> torch.Tensor:
    """(1, 4, H, W) semantic input: validity-zeroed RGB + validity channel."""
    stacked = np.concatenate(
        [candidate.values, candidate.validity[..., None].astype(np.float32)], axis=2
    )
    return torch.from_numpy(stacked.transpose(2, 0, 1)).float()[None]
