"""Amodal-completion candidates: generation backends, consistency scoring,
and top-P selection.

Scoring compares each candidate against the visible region only (the hole
has no ground truth at inference time). Raw pixel error and perceptual
distance are inverted into similarities so that a higher combined score
means greater consistency.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import ImageRecord, MaskedScene, load_image, load_mask, save_mask
from .features import PerceptualDistance, default_extractor
from .validation import check_same_shape

logger = logging.getLogger(__name__)

# Pixel-error inversion scale: s_mse = 1 / (1 + MSE / MSE_SCALE).
MSE_SCALE = 0.01


class BackendUnavailableError(RuntimeError):
    """A completion backend cannot run (missing model, bad configuration)."""


@dataclass
class CandidateCompletion:
    """One completion hypothesis, defined only where ``validity`` is 1."""

    values: np.ndarray  # (H, W, 3) float32 in [0, 1], zero outside validity
    validity: np.ndarray  # (H, W) uint8
    backend_id: str = ""

    def __post_init__(self) -> None:
        check_same_shape(self.values, self.validity, "candidate values and validity")
        self.values = np.asarray(self.values, dtype=np.float32)
        self.validity = np.asarray(self.validity, dtype=np.uint8)
        self.values *= self.validity[..., None]


@dataclass
class ConsistencyScore:
    s_mse: float
    s_lpips: float

    @property
    def s_valid(self) -> float:
        return self.s_mse + self.s_lpips


@dataclass
class CandidateSet:
    """Initial pool plus the top-P selection, with scores aligned to ``initial``."""

    initial: list[CandidateCompletion]
    selected: list[CandidateCompletion]
    scores: list[ConsistencyScore]
    selected_indices: list[int] = field(default_factory=list)


class AmodalBackend:
    """Interface for completion generators.

    Implementations provide ``complete(scene, count, seed)`` returning up to
    ``count`` candidates. Adapters holding device state are assumed
    single-worker unless they declare ``reentrant = True``.
    """

    id: str = "backend"
    reentrant: bool = False

    def complete(self, scene: MaskedScene, count: int, seed: int) -> list[CandidateCompletion]:
        raise NotImplementedError


def synth_candidates(
    gt: ImageRecord,
    scene: MaskedScene,
    n: int,
    corruption: list[float],
    seed: int,
) -> list[CandidateCompletion]:
    """Test-oracle candidates: ground truth blended with seeded noise.

    Candidate i equals the ground truth inside its validity region, mixed
    with uniform noise at level ``corruption[i]``. Validity is the hole plus
    a random dilation into the visible region, so every candidate overlaps
    the visible region and can be scored.
    """
    if len(corruption) != n:
        raise ValueError(f"corruption must have {n} entries, got {len(corruption)}")
    check_same_shape(gt.pixels, scene.mask.bits, "ground truth and scene")
    rng = np.random.default_rng(seed)
    resolution = scene.resolution
    # distinct dilation radii keep the validity supports distinct
    radii = rng.choice(np.arange(1, max(n + 1, resolution // 8)), size=n, replace=False)
    out = []
    for i in range(n):
        level = float(corruption[i])
        if not (0.0 <= level <= 1.0):
            raise ValueError(f"corruption[{i}] must lie in [0, 1], got {level}")
        validity = ndimage.binary_dilation(scene.mask.bits.astype(bool), iterations=int(radii[i]))
        noise = rng.random((resolution, resolution, 3), dtype=np.float32)
        values = (1.0 - level) * gt.pixels + level * noise
        out.append(
            CandidateCompletion(
                values=values * validity[..., None],
                validity=validity.astype(np.uint8),
                backend_id="oracle",
            )
        )
    return out


class OracleBackend(AmodalBackend):
    """Synthetic backend built on ground-truth images.

    ``gt_lookup`` maps scene image ids to their uncorrupted records; each
    call emits ``synth_candidates`` with this backend's corruption schedule.
    """

    id = "oracle"
    reentrant = True

    def __init__(self, gt_lookup: dict[str, ImageRecord], corruption: list[float] | None = None):
        self.gt_lookup = gt_lookup
        self.corruption = corruption

    def complete(self, scene: MaskedScene, count: int, seed: int) -> list[CandidateCompletion]:
        gt = self.gt_lookup.get(scene.image.id)
        if gt is None:
            raise BackendUnavailableError(
                f"backend {self.id!r} has no ground truth for scene {scene.image.id!r}"
            )
        corruption = self.corruption
        if corruption is None:
            corruption = list(np.linspace(0.0, 0.8, count))
        elif len(corruption) != count:
            corruption = list(np.resize(np.asarray(corruption, dtype=float), count))
        return synth_candidates(gt, scene, count, corruption, seed)


class PretrainedBackend(AmodalBackend):
    """Adapter around an external pretrained amodal-completion model.

    The model itself is out of scope here; a caller supplies ``runner``, a
    callable ``(scene, count, seed) -> list[CandidateCompletion]`` wrapping
    the real system. Without one the backend reports itself unavailable.
    """

    id = "pretrained"

    def __init__(self, runner=None):
        self.runner = runner

    def complete(self, scene: MaskedScene, count: int, seed: int) -> list[CandidateCompletion]:
        if self.runner is None:
            raise BackendUnavailableError(
                f"backend {self.id!r} is not configured: no pretrained amodal model runner supplied"
            )
        return self.runner(scene, count, seed)


def generate_candidates(
    scene: MaskedScene,
    backend: AmodalBackend,
    n: int,
    seed: int = 0,
) -> list[CandidateCompletion]:
    """Produce up to ``n`` completions; per-sample failures are tolerated."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    try:
        candidates = backend.complete(scene, n, seed)
    except BackendUnavailableError:
        raise
    except Exception as exc:
        raise BackendUnavailableError(f"backend {backend.id!r} failed: {exc}") from exc
    if len(candidates) < n:
        logger.warning(
            "backend %r returned %d of %d candidates for scene %s",
            backend.id, len(candidates), n, scene.image.id,
        )
    if not candidates:
        raise BackendUnavailableError(
            f"backend {backend.id!r} produced zero candidates for scene {scene.image.id!r}"
        )
    return candidates


def _to_batch(rgb: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))[None]


def consistency_score(
    candidate: CandidateCompletion,
    scene: MaskedScene,
    perceptual: PerceptualDistance | None = None,
) -> ConsistencyScore:
    """Score a candidate against the visible region it overlaps.

    MSE is computed on the overlap directly. The perceptual term compares the
    image with a copy whose overlap region is replaced by the candidate, so
    the distance is attributable to the candidate alone. Both raw values are
    inverted to [0, 1] similarities.
    """
    check_same_shape(candidate.values, scene.mask.bits, "candidate and scene")
    visible = (1 - scene.mask.bits).astype(bool)
    overlap = candidate.validity.astype(bool) & visible
    if not overlap.any():
        raise ValueError("candidate validity does not overlap the visible region; unscorable")

    diff = candidate.values[overlap] - scene.image.pixels[overlap]
    mse = float(np.mean(diff**2))
    s_mse = 1.0 / (1.0 + mse / MSE_SCALE)

    swapped = scene.image.pixels.copy()
    swapped[overlap] = candidate.values[overlap]
    if perceptual is None:
        perceptual = PerceptualDistance(default_extractor())
    with torch.no_grad():
        lpips_raw = float(perceptual(_to_batch(scene.image.pixels), _to_batch(swapped))[0])
    s_lpips = float(np.clip(1.0 - lpips_raw, 0.0, 1.0))
    return ConsistencyScore(s_mse=s_mse, s_lpips=s_lpips)


def select_top_p(
    candidates: list[CandidateCompletion],
    scores: list[ConsistencyScore],
    p: int,
    key: str = "s_valid",
) -> CandidateSet:
    """Keep the ``p`` highest-scoring candidates; ties break to lower index.

    ``key`` picks the ranking score (``s_valid``, ``s_mse``, or ``s_lpips``)
    so ablation variants can rank on a single component.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    if len(candidates) != len(scores):
        raise ValueError("candidates and scores are misaligned")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if p > len(candidates):
        logger.warning("requested top-%d of %d candidates; selecting all", p, len(candidates))
        p = len(candidates)
    values = np.array([getattr(s, key) for s in scores])
    order = np.argsort(-values, kind="stable")[:p]
    return CandidateSet(
        initial=list(candidates),
        selected=[candidates[i] for i in order],
        scores=list(scores),
        selected_indices=[int(i) for i in order],
    )


# ---------------------------------------------------------------------------
# Persistence: one directory per image with cand_<i>.png / valid_<i>.png and
# a manifest carrying backend ids, score components, and selection flags.
# ---------------------------------------------------------------------------


def save_candidate_set(cand_set: CandidateSet, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cand, score) in enumerate(zip(cand_set.initial, cand_set.scores)):
        arr = (np.clip(cand.values, 0, 1) * 255.0 + 0.5).astype(np.uint8)
        from PIL import Image

        Image.fromarray(arr, mode="RGB").save(out_dir / f"cand_{i}.png")
        save_mask_bits = cand.validity
        Image.fromarray((save_mask_bits * 255).astype(np.uint8), mode="L").save(
            out_dir / f"valid_{i}.png"
        )
        entries.append(
            {
                "index": i,
                "backend_id": cand.backend_id,
                "s_mse": score.s_mse,
                "s_lpips": score.s_lpips,
                "s_valid": score.s_valid,
                "selected": i in cand_set.selected_indices,
            }
        )
    manifest = {"candidates": entries, "selected_indices": cand_set.selected_indices}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_candidate_set(cand_dir: str | Path) -> CandidateSet:
    cand_dir = Path(cand_dir)
    manifest = json.loads((cand_dir / "manifest.json").read_text())
    initial, scores = [], []
    for entry in manifest["candidates"]:
        i = entry["index"]
        values_rec = load_image(cand_dir / f"cand_{i}.png", resolution=_png_resolution(cand_dir / f"cand_{i}.png"))
        validity = load_mask(cand_dir / f"valid_{i}.png").bits
        initial.append(
            CandidateCompletion(
                values=values_rec.pixels, validity=validity, backend_id=entry["backend_id"]
            )
        )
        scores.append(ConsistencyScore(s_mse=entry["s_mse"], s_lpips=entry["s_lpips"]))
    indices = manifest["selected_indices"]
    return CandidateSet(
        initial=initial,
        selected=[initial[i] for i in indices],
        scores=scores,
        selected_indices=list(indices),
    )


def _png_resolution(path: Path) -> int:
    from PIL import Image

    with Image.open(path) as img:
        return img.size[1]
