"""Evaluation harness: downstream inpainter adapters, metric reports, and
the ablation grid runner.

Adapters wrap external inpainting systems behind a minimal protocol (image
plus hole mask in, image out) so the guidance stage needs no knowledge of
their internals. Reports carry a manifest hash so only rows computed over
identical image ids and mask seeds are compared.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .candidates import (
    CandidateSet,
    consistency_score,
    generate_candidates,
    select_top_p,
)
from .data import ImageRecord, MaskedScene
from .metrics import clip_at_mask, fid, lpips_metric
from .selection import GuidanceImage
from .training import TrainConfig, infer_guidance, train

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    """One method's scores over one evaluation set."""

    method_id: str
    mask_protocol: str
    n_images: int
    fid: float
    lpips_mean: float
    c_at_m_mean: float
    manifest_hash: str = ""
    status: str = "complete"
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def manifest_hash(ids: list[str], mask_seeds: list[int]) -> str:
    """Digest of the evaluation set identity (image ids + mask seeds)."""
    digest = hashlib.sha256()
    for i, s in sorted(zip(ids, mask_seeds)):
        digest.update(f"{i}:{s};".encode())
    return digest.hexdigest()[:16]


class InpainterAdapter:
    """Minimal downstream-inpainter interface.

    ``inpaint`` receives an RGB array in [0, 1] and a binary hole mask and
    returns a full-resolution RGB array; the visible region must be
    preserved within the adapter's declared tolerance.
    """

    id: str = "adapter"
    accepts_guidance: bool = True
    visible_tolerance: float = 1e-6

    def inpaint(self, rgb: np.ndarray, hole: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityAdapter(InpainterAdapter):
    """Test stub: returns its input unchanged."""

    id = "identity"

    def inpaint(self, rgb: np.ndarray, hole: np.ndarray) -> np.ndarray:
        return rgb.copy()


class TeleaAdapter(InpainterAdapter):
    """Classical diffusion-based inpainter (deterministic, CPU-only)."""

    def __init__(self, adapter_id: str = "telea", accepts_guidance: bool = True, radius: int = 5):
        self.id = adapter_id
        self.accepts_guidance = accepts_guidance
        self.radius = radius

    def inpaint(self, rgb: np.ndarray, hole: np.ndarray) -> np.ndarray:
        img8 = (np.clip(rgb, 0, 1) * 255.0 + 0.5).astype(np.uint8)
        out = cv2.inpaint(img8, hole.astype(np.uint8), self.radius, cv2.INPAINT_TELEA)
        return out.astype(np.float32) / 255.0


ADAPTERS: dict[str, InpainterAdapter] = {}


def register_adapter(adapter: InpainterAdapter) -> None:
    ADAPTERS[adapter.id] = adapter


def get_adapter(adapter_id: str) -> InpainterAdapter:
    if adapter_id not in ADAPTERS:
        raise KeyError(f"no inpainter adapter registered under id {adapter_id!r}")
    return ADAPTERS[adapter_id]


register_adapter(IdentityAdapter())
register_adapter(TeleaAdapter())
register_adapter(TeleaAdapter(adapter_id="telea-baseline", accepts_guidance=False))


def run_downstream(
    guide: GuidanceImage | None,
    scene: MaskedScene,
    adapter: InpainterAdapter,
) -> ImageRecord:
    """Drive a downstream inpainter, optionally with guidance.

    With guidance, guide-filled pixels become known context and only the
    residual-masked pixels remain holes; without, the adapter sees the
    original scene.
    """
    try:
        if adapter.accepts_guidance and guide is not None:
            residual = (scene.mask.bits.astype(bool) & ~guide.filled.astype(bool)).astype(np.uint8)
            out = adapter.inpaint(guide.pixels, residual)
        else:
            out = adapter.inpaint(scene.visible_rgb, scene.mask.bits)
    except Exception as exc:
        raise RuntimeError(f"inpainter adapter {adapter.id!r} failed: {exc}") from exc
    if out.shape != scene.image.pixels.shape:
        raise RuntimeError(
            f"adapter {adapter.id!r} returned shape {out.shape}, expected {scene.image.pixels.shape}"
        )
    return ImageRecord(id=scene.image.id, pixels=np.clip(out, 0.0, 1.0))


def evaluate_method(
    outputs: list[ImageRecord],
    gts: list[ImageRecord],
    scenes: list[MaskedScene],
    method_id: str,
    mask_protocol: str = "",
) -> MetricReport:
    """Score one method's outputs against ground truth over a scene set."""
    if not (len(outputs) == len(gts) == len(scenes)):
        raise ValueError("outputs, ground truths, and scenes must align")
    lpips_vals = [lpips_metric(o, g) for o, g in zip(outputs, gts)]
    cam_vals = [clip_at_mask(o, g, s.mask) for o, g, s in zip(outputs, gts, scenes)]
    return MetricReport(
        method_id=method_id,
        mask_protocol=mask_protocol,
        n_images=len(outputs),
        fid=fid(outputs, gts),
        lpips_mean=float(np.mean(lpips_vals)),
        c_at_m_mean=float(np.mean(cam_vals)),
        manifest_hash=manifest_hash(
            [s.image.id for s in scenes], [s.mask.seed for s in scenes]
        ),
    )


def check_comparable(rows: list[MetricReport]) -> None:
    hashes = {r.manifest_hash for r in rows if r.status == "complete"}
    if len(hashes) > 1:
        raise ValueError(
            f"reports computed over different image/mask sets: {sorted(hashes)}"
        )


# ---------------------------------------------------------------------------
# Guidance construction per ablation variant
# ---------------------------------------------------------------------------


def top1_paste_guidance(scene: MaskedScene, cand_set: CandidateSet) -> GuidanceImage:
    """P=1 path: paste the top-ranked candidate, bypassing fusion and
    pixel selection entirely."""
    top = cand_set.selected[0]
    mask = scene.mask.bits.astype(bool)
    filled = mask & top.validity.astype(bool)
    pixels = scene.visible_rgb.copy()
    pixels[filled] = top.values[filled]
    chosen = np.where(filled, 0, -1).astype(np.int32)
    return GuidanceImage(pixels=pixels, filled=filled.astype(np.uint8), chosen_index=chosen)


def uniform_blend_guidance(scene: MaskedScene, cand_set: CandidateSet) -> GuidanceImage:
    """Pixel-selection-off variant: equal-weight blend of valid candidates."""
    mask = scene.mask.bits.astype(bool)
    validity = np.stack([c.validity for c in cand_set.selected]).astype(np.float32)
    values = np.stack([c.values for c in cand_set.selected])
    counts = validity.sum(axis=0)
    blended = (values * validity[..., None]).sum(axis=0) / np.maximum(counts, 1.0)[..., None]
    filled = mask & (counts > 0)
    pixels = scene.visible_rgb.copy()
    pixels[filled] = blended[filled]
    chosen = np.where(filled, 0, -1).astype(np.int32)
    return GuidanceImage(pixels=pixels, filled=filled.astype(np.uint8), chosen_index=chosen)


SCORE_VARIANTS = {"mse": "s_mse", "lpips": "s_lpips", "mse+lpips": "s_valid"}


def build_candidate_sets(
    scenes: list[MaskedScene],
    backend,
    n: int,
    p: int,
    seed: int = 0,
    score_variant: str = "mse+lpips",
) -> dict[str, CandidateSet]:
    """Generate, score, and select candidates for every scene."""
    key = SCORE_VARIANTS[score_variant]
    out = {}
    for i, scene in enumerate(scenes):
        cands = generate_candidates(scene, backend, n, seed=seed + i)
        scores = [consistency_score(c, scene) for c in cands]
        out[scene.image.id] = select_top_p(cands, scores, p, key=key)
    return out


def ablation_run(
    base_config: TrainConfig,
    axes: dict[str, list],
    scenes: list[MaskedScene],
    gts: list[ImageRecord],
    backend,
    out_dir,
    adapter: InpainterAdapter | None = None,
    train_steps: int = 60,
    mask_protocol: str = "toy",
) -> list[MetricReport]:
    """Run the ablation grid; one MetricReport row per variant.

    Axes: score_variant, p, pixel_selection_on, encoder_design. Variants
    whose training fails are reported with status="incomplete" and the run
    continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if adapter is None:
        adapter = get_adapter("identity")

    names = sorted(axes)
    rows: list[MetricReport] = []
    for combo in itertools.product(*(axes[name] for name in names)):
        variant = dict(zip(names, combo))
        method_id = ",".join(f"{k}={v}" for k, v in sorted(variant.items()))
        cfg_dict = asdict(base_config)
        cfg_dict["p"] = int(variant.get("p", base_config.p))
        cfg_dict["encoder_design"] = variant.get("encoder_design", base_config.encoder_design)
        for key in ("channels", "heads", "depths"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = TrainConfig(**cfg_dict)
        score_variant = variant.get("score_variant", "mse+lpips")
        pixel_selection_on = bool(variant.get("pixel_selection_on", True))

        try:
            store = build_candidate_sets(
                scenes, backend, config.n, config.p, seed=config.seed, score_variant=score_variant
            )
            guides = _variant_guidance(
                config, variant, pixel_selection_on, scenes, gts, store, out_dir / method_id,
                train_steps,
            )
            outputs = [
                run_downstream(guide, scene, adapter) for guide, scene in zip(guides, scenes)
            ]
            report = evaluate_method(outputs, gts, scenes, method_id, mask_protocol)
            report.config = variant
        except Exception as exc:  # noqa: BLE001 - a broken variant must not kill the grid
            logger.warning("variant %s incomplete: %s", method_id, exc)
            report = MetricReport(
                method_id=method_id,
                mask_protocol=mask_protocol,
                n_images=len(scenes),
                fid=float("nan"),
                lpips_mean=float("nan"),
                c_at_m_mean=float("nan"),
                status="incomplete",
                config=variant,
            )
        rows.append(report)
    return rows


def _variant_guidance(
    config: TrainConfig,
    variant: dict,
    pixel_selection_on: bool,
    scenes: list[MaskedScene],
    gts: list[ImageRecord],
    store: dict[str, CandidateSet],
    work_dir: Path,
    train_steps: int,
) -> list[GuidanceImage]:
    if config.p == 1:
        # top-1 bypass: no fusion, no pixel selection
        return [top1_paste_guidance(s, store[s.image.id]) for s in scenes]
    if not pixel_selection_on:
        return [uniform_blend_guidance(s, store[s.image.id]) for s in scenes]
    selected = {k: v.selected for k, v in store.items()}
    result = train(config, scenes, gts, selected, work_dir, max_steps=train_steps)
    return [
        infer_guidance(s, store[s.image.id], result.model, threshold=config.threshold)
        for s in scenes
    ]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_report(rows: list[MetricReport], path) -> None:
    """Text table plus one machine-readable JSON record per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{'method':<40} {'protocol':<12} {'n':>4} {'FID':>10} {'LPIPS':>8} {'C@m':>7}  status"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.method_id:<40} {r.mask_protocol:<12} {r.n_images:>4} "
            f"{r.fid:>10.4f} {r.lpips_mean:>8.4f} {r.c_at_m_mean:>7.4f}  {r.status}"
        )
    path.write_text("\n".join(lines) + "\n")
    with path.with_suffix(".jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict()) + "\n")


def plot_report(rows: list[MetricReport], path) -> None:
    """Metric-vs-variant bar charts."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ["fid", "lpips_mean", "c_at_m_mean"]
    fig, axes = plt.subplots(1, 3, figsize=(4 * len(metrics), 4))
    labels = [r.method_id for r in rows]
    for ax, metric in zip(axes, metrics):
        ax.bar(range(len(rows)), [getattr(r, metric) for r in rows])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_title(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
