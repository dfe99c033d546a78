"""The guidance generator assembled: encoders, fusion, scoring, blending.

Also owns the checkpoint format: a single archive with a mandatory version
field, the configuration, and named parameter tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .candidates import CandidateCompletion
from .data import MaskedScene
from .features import FixedFeatureExtractor, PerceptualDistance
from .fusion import (
    FeaturePyramid,
    FusionConfig,
    FusionDecoder,
    HierarchicalEncoder,
    candidate_to_tensor,
    scene_to_tensor,
)
from .selection import (
    GuidanceImage,
    HierarchicalBlender,
    PerceptualScoreNet,
    ScoreVolume,
    StructureScoreNet,
    aggregate_scores,
    compose_guidance,
    downsample_mask,
    downsample_rgb,
)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture settings for the full guidance model."""

    resolution: int = 256
    patch_size: int = 4
    levels: int = 4
    channels: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 8
    depths: tuple[int, ...] = field(default_factory=lambda: (2, 2, 2, 2))
    mlp_ratio: float = 2.0
    candidate_count: int = 3
    encoder_design: str = "dual"  # dual | single
    feature_seed: int = 0
    init_seed: int = 0

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.heads = tuple(self.heads)
        self.depths = tuple(self.depths)
        if self.encoder_design not in ("dual", "single"):
            raise ValueError(f"encoder_design must be 'dual' or 'single', got {self.encoder_design!r}")

    def fusion(self) -> FusionConfig:
        return FusionConfig(
            resolution=self.resolution,
            patch_size=self.patch_size,
            levels=self.levels,
            channels=self.channels,
            heads=self.heads,
            window_size=self.window_size,
            depths=self.depths,
            mlp_ratio=self.mlp_ratio,
            candidate_count=self.candidate_count,
        )


class GuidanceModel(nn.Module):
    """End-to-end scorer: inputs to per-candidate confidence volumes.

    The dual design runs separate context/semantic encoders joined by
    cross-attention; the single-design ablation concatenates the masked
    image and all candidates channel-wise into one encoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        fusion_cfg = config.fusion()
        with torch.random.fork_rng():
            torch.manual_seed(config.init_seed)
            if config.encoder_design == "dual":
                self.context_encoder = HierarchicalEncoder(fusion_cfg, in_channels=4, source="context")
                self.semantic_encoder = HierarchicalEncoder(fusion_cfg, in_channels=4, source="semantic")
                self.decoder = FusionDecoder(fusion_cfg)
            else:
                in_ch = 4 + 4 * config.candidate_count
                self.joint_encoder = HierarchicalEncoder(fusion_cfg, in_channels=in_ch, source="fused")
            self.structure_net = StructureScoreNet(config.channels)
            self.perceptual_net = PerceptualScoreNet(
                config.channels, extractor=FixedFeatureExtractor(seed=config.feature_seed)
            )
            self.blender = HierarchicalBlender(config.levels)

    # -- encoding -----------------------------------------------------------

    def encode_context(self, scene_t: torch.Tensor) -> FeaturePyramid:
        return self.context_encoder(scene_t)

    def encode_semantic(self, cand_t: torch.Tensor) -> FeaturePyramid:
        return self.semantic_encoder(cand_t)

    def fuse(self, ctx: FeaturePyramid, sems: list[FeaturePyramid]) -> FeaturePyramid:
        return self.decoder(ctx, sems)

    # -- scoring ------------------------------------------------------------

    def score_maps(self, scene_t: torch.Tensor, cand_t: torch.Tensor) -> ScoreVolume:
        """Confidence volume for a batch.

        scene_t: (B, 4, H, W); cand_t: (B, P, 4, H, W).
        """
        B, P = cand_t.shape[:2]
        if self.config.encoder_design == "dual":
            ctx = self.encode_context(scene_t)
            sems = [self.encode_semantic(cand_t[:, i]) for i in range(P)]
            fused = self.fuse(ctx, sems)
        else:
            if P != self.config.candidate_count:
                raise ValueError(
                    f"single-encoder design is fixed to {self.config.candidate_count} candidates, got {P}"
                )
            joint = torch.cat([scene_t, cand_t.reshape(B, P * 4, *cand_t.shape[-2:])], dim=1)
            fused = self.joint_encoder(joint)
            fused.source = "fused"

        raw = []
        for l, fused_l in enumerate(fused.levels):
            size = fused_l.shape[-1]
            scene_l = torch.cat(
                [downsample_rgb(scene_t[:, :3], size), downsample_mask(scene_t[:, 3:4], size)], dim=1
            )
            level_scores = []
            for i in range(P):
                cand_l = torch.cat(
                    [
                        downsample_rgb(cand_t[:, i, :3], size),
                        downsample_mask(cand_t[:, i, 3:4], size),
                    ],
                    dim=1,
                )
                s = self.structure_net(fused_l, cand_l, scene_l, l)
                p = self.perceptual_net(fused_l, cand_l, scene_l, l)
                level_scores.append(aggregate_scores(s, p))
            raw.append(torch.cat(level_scores, dim=1))  # (B, P, H_l, W_l)
        return self.blender.refine(raw, self.config.resolution)

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def infer(
        self,
        scene: MaskedScene,
        candidates: list[CandidateCompletion],
        threshold: float = 0.5,
    ) -> GuidanceImage:
        """Hard-mode guidance for one scene."""
        if scene.resolution != self.config.resolution:
            raise ValueError(
                f"scene resolution {scene.resolution} does not match model "
                f"resolution {self.config.resolution}"
            )
        self.eval()
        scene_t = scene_to_tensor(scene)
        cand_t = torch.cat([candidate_to_tensor(c) for c in candidates], dim=0)[None]
        volume = self.score_maps(scene_t, cand_t)
        final = volume.final[0].numpy()
        return compose_guidance(final, candidates, scene, threshold=threshold, mode="hard")

    def perceptual_distance(self) -> PerceptualDistance:
        """Distance reusing this model's frozen extractor (training loss)."""
        return PerceptualDistance(self.perceptual_net.extractor)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    model: GuidanceModel,
    step: int,
    extra: dict | None = None,
    loss_history: str = "",
) -> None:
    """Atomic write of version, config, betas, and named parameters."""
    import os

    payload = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "betas": model.blender.betas.detach().tolist(),
        "loss_history": loss_history,
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[GuidanceModel, dict]:
    """Rebuild the model from an archive; returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "version" not in payload:
        raise ValueError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {payload['version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = ModelConfig(**payload["config"])
    model = GuidanceModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
