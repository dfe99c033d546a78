"""End-to-end optimization of the guidance model.

Candidate generation is offline: the trainer consumes a pre-built store of
selected candidates per scene. Training composites in soft (temperature
softmax) mode with the temperature annealed linearly; inference composites
in hard mode.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .candidates import CandidateCompletion, CandidateSet
from .data import ImageRecord, MaskedScene
from .losses import hier_loss, recon_loss, total_loss, LossBreakdown
from .model import GuidanceModel, ModelConfig, load_checkpoint, save_checkpoint
from .selection import GuidanceImage, downsample_mask, downsample_rgb, soft_composite

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimization and architecture settings, flat for config files."""

    lr: float = 2e-4
    batch_size: int = 12
    epochs: int = 200
    lambda_: float = 0.8
    tau_start: float = 1.0
    tau_end: float = 0.1
    p: int = 3
    n: int = 8
    seed: int = 0
    resolution: int = 256
    threshold: float = 0.5
    grad_clip: float = 1.0
    patch_size: int = 4
    levels: int = 4
    channels: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 8
    depths: tuple[int, ...] = field(default_factory=lambda: (2, 2, 2, 2))
    mlp_ratio: float = 2.0
    encoder_design: str = "dual"

    def __post_init__(self) -> None:
        for name in ("lr", "batch_size", "epochs", "p", "n", "resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.lambda_ <= 1.0):
            raise ValueError(f"lambda_ must lie in [0, 1], got {self.lambda_}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            resolution=self.resolution,
            patch_size=self.patch_size,
            levels=self.levels,
            channels=tuple(self.channels),
            heads=tuple(self.heads),
            window_size=self.window_size,
            depths=tuple(self.depths),
            mlp_ratio=self.mlp_ratio,
            candidate_count=self.p,
            encoder_design=self.encoder_design,
            init_seed=self.seed,
        )

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        for key in ("channels", "heads", "depths"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def pick_device() -> torch.device:
    name = os.environ.get("SEMGUIDE_DEVICE", "")
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def pack_batch(
    scenes: list[MaskedScene],
    candidates: list[list[CandidateCompletion]],
    gts: list[ImageRecord],
    device: torch.device | None = None,
) -> dict[str, torch.Tensor]:
    """Stack scenes/candidates/targets into training tensors.

    All scenes in a batch must share resolution and candidate count.
    """
    p = len(candidates[0])
    if any(len(c) != p for c in candidates):
        raise ValueError("all items in a batch must have the same candidate count")
    scene_t = torch.stack(
        [torch.from_numpy(s.masked_pixels.transpose(2, 0, 1)) for s in scenes]
    ).float()
    cand_t = torch.stack(
        [
            torch.stack(
                [
                    torch.from_numpy(
                        np.concatenate(
                            [c.values, c.validity[..., None].astype(np.float32)], axis=2
                        ).transpose(2, 0, 1)
                    )
                    for c in cands
                ]
            )
            for cands in candidates
        ]
    ).float()
    batch = {
        "scene": scene_t,  # (B, 4, H, W)
        "cand": cand_t,  # (B, P, 4, H, W)
        "gt": torch.stack([torch.from_numpy(g.pixels.transpose(2, 0, 1)) for g in gts]).float(),
        "mask": scene_t[:, 3:4].clone(),  # (B, 1, H, W)
        "ids": [s.image.id for s in scenes],
    }
    if device is not None:
        batch = {k: (v.to(device) if isinstance(v, torch.Tensor) else v) for k, v in batch.items()}
    return batch


def forward_losses(
    model: GuidanceModel,
    batch: dict[str, torch.Tensor],
    tau: float,
    lambda_: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Soft-mode forward pass through scoring, compositing, and all losses."""
    scene_t, cand_t = batch["scene"], batch["cand"]
    volume = model.score_maps(scene_t, cand_t)

    cand_rgb = cand_t[:, :, :3]  # (B, P, 3, H, W)
    validity = cand_t[:, :, 3]  # (B, P, H, W)
    mask = batch["mask"]
    scene_rgb = scene_t[:, :3]

    pixels, weights = soft_composite(volume.final, cand_rgb, validity, scene_rgb, mask, tau)
    filled = mask * (validity > 0).any(dim=1, keepdim=True).float()

    perceptual = model.perceptual_distance()
    l1, perc, smooth = recon_loss(pixels, batch["gt"], filled, weights, mask, perceptual)

    # per-level soft composites, finest first, for the cross-scale term
    level_images = []
    for refined_l in volume.refined:
        size = refined_l.shape[-1]
        cand_rgb_l = torch.stack(
            [downsample_rgb(cand_rgb[:, i], size) for i in range(cand_rgb.shape[1])], dim=1
        )
        validity_l = downsample_mask(validity, size)
        mask_l = downsample_mask(mask, size)
        scene_rgb_l = downsample_rgb(scene_rgb, size)
        img_l, _ = soft_composite(refined_l, cand_rgb_l, validity_l, scene_rgb_l, mask_l, tau)
        level_images.append(img_l)
    hier = hier_loss(level_images)

    recon = l1 + perc + smooth
    loss = total_loss(recon, hier, lambda_)
    breakdown = LossBreakdown(
        l1=l1.detach().item(), perceptual=perc.detach().item(), smooth=smooth.detach().item(),
        hier=hier.detach().item(), lambda_=lambda_,
    )
    return loss, breakdown


@dataclass
class TrainResult:
    model: GuidanceModel
    checkpoints: list[str]
    history: list[dict]
    final_checkpoint: str


def train(
    config: TrainConfig,
    scenes: list[MaskedScene],
    gts: list[ImageRecord],
    candidate_store: dict[str, list[CandidateCompletion]],
    out_dir,
    max_steps: int | None = None,
) -> TrainResult:
    """Optimize the model; checkpoints every epoch, losses logged per step.

    ``candidate_store`` maps scene ids to their selected candidates
    (generation is offline; the completion backend stays frozen).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = pick_device()

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = GuidanceModel(config.model_config()).to(device)
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad], lr=config.lr
    )

    items = [(s, candidate_store[s.image.id], g) for s, g in zip(scenes, gts)]
    steps_per_epoch = max(1, (len(items) + config.batch_size - 1) // config.batch_size)
    planned = max_steps if max_steps is not None else steps_per_epoch * config.epochs

    history: list[dict] = []
    checkpoints: list[str] = []
    history_path = out_dir / "losses.jsonl"
    step = 0
    done = False
    with history_path.open("w") as log:
        for epoch in range(config.epochs):
            order = rng.permutation(len(items))
            for start in range(0, len(items), config.batch_size):
                idx = order[start : start + config.batch_size]
                batch_items = [items[i] for i in idx]
                batch = pack_batch(
                    [it[0] for it in batch_items],
                    [it[1] for it in batch_items],
                    [it[2] for it in batch_items],
                    device=device,
                )
                frac = step / max(planned - 1, 1)
                tau = config.tau_start + (config.tau_end - config.tau_start) * min(frac, 1.0)

                optimizer.zero_grad()
                loss, breakdown = forward_losses(model, batch, tau, config.lambda_)
                if not torch.isfinite(loss):
                    dump = out_dir / "nan_dump.json"
                    dump.write_text(
                        json.dumps(
                            {"step": step, "ids": batch["ids"], "breakdown": breakdown.to_json()}
                        )
                    )
                    raise RuntimeError(
                        f"non-finite loss at step {step}; offending batch dumped to {dump}"
                    )
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()

                record = json.loads(breakdown.to_json())
                record.update({"step": step, "epoch": epoch, "tau": tau})
                history.append(record)
                log.write(json.dumps(record) + "\n")
                step += 1
                if max_steps is not None and step >= max_steps:
                    done = True
                    break
            ckpt_path = str(out_dir / f"ckpt_epoch{epoch:04d}.pt")
            save_checkpoint(ckpt_path, model, step, loss_history=str(history_path))
            checkpoints.append(ckpt_path)
            if done:
                break

    final = str(out_dir / "ckpt_final.pt")
    save_checkpoint(final, model, step, loss_history=str(history_path))
    return TrainResult(model=model, checkpoints=checkpoints, history=history, final_checkpoint=final)


def infer_guidance(
    scene: MaskedScene,
    candidates: CandidateSet | list[CandidateCompletion],
    checkpoint,
    threshold: float = 0.5,
) -> GuidanceImage:
    """Hard-mode guidance from a trained checkpoint (deterministic)."""
    if isinstance(checkpoint, GuidanceModel):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    cands = candidates.selected if isinstance(candidates, CandidateSet) else candidates
    return model.infer(scene, cands, threshold=threshold)
