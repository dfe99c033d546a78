"""Semantic guidance images for large-mask inpainting.

Pipeline: generate amodal-completion candidates for a masked scene, score
and select the consistent ones, fuse them with the masked-image context via
dual hierarchical encoders and cross-attention, score every candidate per
pixel per scale, and composite a guidance image any downstream inpainter can
consume unchanged.
"""

from .candidates import (
    AmodalBackend,
    CandidateCompletion,
    CandidateSet,
    ConsistencyScore,
    OracleBackend,
    PretrainedBackend,
    consistency_score,
    generate_candidates,
    select_top_p,
    synth_candidates,
)
from .data import (
    ImageRecord,
    Mask,
    MaskedScene,
    apply_mask,
    load_image_dir,
    make_center_box_mask,
    make_random_brush_mask,
)
from .estimator import GuidanceGenerator
from .fusion import FeaturePyramid, FusionConfig
from .losses import LossBreakdown, hier_loss, recon_loss, total_loss
from .metrics import clip_at_mask, fid, lpips_metric
from .model import GuidanceModel, ModelConfig, load_checkpoint, save_checkpoint
from .selection import (
    GuidanceImage,
    ScoreVolume,
    aggregate_scores,
    blend_hierarchical,
    compose_guidance,
)
from .training import TrainConfig, infer_guidance, train

__version__ = "0.1.0"

__all__ = [
    "AmodalBackend",
    "CandidateCompletion",
    "CandidateSet",
    "ConsistencyScore",
    "FeaturePyramid",
    "FusionConfig",
    "GuidanceGenerator",
    "GuidanceImage",
    "GuidanceModel",
    "ImageRecord",
    "LossBreakdown",
    "Mask",
    "MaskedScene",
    "ModelConfig",
    "OracleBackend",
    "PretrainedBackend",
    "ScoreVolume",
    "TrainConfig",
    "aggregate_scores",
    "apply_mask",
    "blend_hierarchical",
    "clip_at_mask",
    "compose_guidance",
    "consistency_score",
    "fid",
    "generate_candidates",
    "hier_loss",
    "infer_guidance",
    "load_checkpoint",
    "load_image_dir",
    "lpips_metric",
    "make_center_box_mask",
    "make_random_brush_mask",
    "recon_loss",
    "save_checkpoint",
    "select_top_p",
    "synth_candidates",
    "total_loss",
    "train",
]
