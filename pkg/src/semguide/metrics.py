"""Image-quality metrics: Frechet feature distance, perceptual distance,
and masked-region embedding similarity."""

from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np
import torch

from .data import ImageRecord, Mask
from .features import PerceptualDistance, PooledEmbedder, RegionEmbedder, default_extractor
from .validation import check_same_shape

logger = logging.getLogger(__name__)

FID_FEATURE_DIM = 2048
FID_SMALL_SAMPLE = 2048
COV_RIDGE = 1e-6
MIN_CROP = 8


@lru_cache(maxsize=2)
def _pooled_embedder(dim: int = FID_FEATURE_DIM) -> PooledEmbedder:
    return PooledEmbedder(dim=dim)


@lru_cache(maxsize=2)
def _region_embedder() -> RegionEmbedder:
    return RegionEmbedder()


def _to_tensor_stack(images: list[ImageRecord] | np.ndarray) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float32)
    else:
        arr = np.stack([im.pixels for im in images]).astype(np.float32)
    return torch.from_numpy(arr.transpose(0, 3, 1, 2))


def _pool_features(images, embedder: PooledEmbedder, batch: int = 16) -> np.ndarray:
    x = _to_tensor_stack(images)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            out.append(embedder(x[i : i + batch]).numpy())
    return np.concatenate(out, axis=0).astype(np.float64)


def _frechet(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), via eigh."""
    from scipy import linalg

    diff = float(np.sum((mu1 - mu2) ** 2))
    vals1, vecs1 = linalg.eigh(sigma1)
    vals1 = np.clip(vals1, 0.0, None)
    root1 = (vecs1 * np.sqrt(vals1)) @ vecs1.T
    inner = root1 @ sigma2 @ root1
    vals = linalg.eigvalsh((inner + inner.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    trace_term = float(np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.sum(np.sqrt(vals)))
    return diff + trace_term


def fid(
    generated: list[ImageRecord] | np.ndarray,
    reference: list[ImageRecord] | np.ndarray,
    embedder: PooledEmbedder | None = None,
) -> float:
    """Frechet distance between Gaussian fits of pooled deep features."""
    n_gen, n_ref = len(generated), len(reference)
    if n_gen < 2 or n_ref < 2:
        raise ValueError(f"both sets need >= 2 images, got {n_gen} and {n_ref}")
    if min(n_gen, n_ref) < FID_SMALL_SAMPLE:
        logger.warning(
            "small-sample distance: %d/%d images (< %d); values are not comparable "
            "to large-scale reports",
            n_gen, n_ref, FID_SMALL_SAMPLE,
        )
    if embedder is None:
        embedder = _pooled_embedder()
    feats_g = _pool_features(generated, embedder)
    feats_r = _pool_features(reference, embedder)

    mu_g, mu_r = feats_g.mean(axis=0), feats_r.mean(axis=0)
    sigma_g = np.cov(feats_g, rowvar=False)
    sigma_r = np.cov(feats_r, rowvar=False)
    dim = sigma_g.shape[0]
    # rank-deficient fits (n <= dim) get a logged diagonal ridge
    if min(n_gen, n_ref) <= dim or not np.isfinite(sigma_g).all() or not np.isfinite(sigma_r).all():
        logger.info("adding ridge %.0e to covariance diagonals", COV_RIDGE)
        sigma_g = sigma_g + COV_RIDGE * np.eye(dim)
        sigma_r = sigma_r + COV_RIDGE * np.eye(dim)
    value = _frechet(mu_g, sigma_g, mu_r, sigma_r)
    return max(value, 0.0)


def lpips_metric(a: ImageRecord, b: ImageRecord, distance: PerceptualDistance | None = None) -> float:
    """Perceptual distance between two images (0 for identical inputs)."""
    check_same_shape(a.pixels, b.pixels, "images")
    if distance is None:
        distance = PerceptualDistance(default_extractor())
    ta = torch.from_numpy(a.pixels.transpose(2, 0, 1))[None]
    tb = torch.from_numpy(b.pixels.transpose(2, 0, 1))[None]
    with torch.no_grad():
        return float(distance(ta, tb)[0])


def mask_bbox(mask: Mask, min_size: int = MIN_CROP) -> tuple[int, int, int, int]:
    """Tight (y0, y1, x0, x1) box around the hole, padded to a minimum size."""
    ys, xs = np.nonzero(mask.bits)
    if len(ys) == 0:
        raise ValueError("mask is empty; no region to crop")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    H, W = mask.bits.shape
    if y1 - y0 < min_size or x1 - x0 < min_size:
        logger.info("bounding box %dx%d below %dpx; padding", y1 - y0, x1 - x0, min_size)
    while y1 - y0 < min_size:
        y0, y1 = max(y0 - 1, 0), min(y1 + 1, H)
        if y0 == 0 and y1 == H:
            break
    while x1 - x0 < min_size:
        x0, x1 = max(x0 - 1, 0), min(x1 + 1, W)
        if x0 == 0 and x1 == W:
            break
    return y0, y1, x0, x1


def clip_at_mask(
    restored: ImageRecord,
    gt: ImageRecord,
    mask: Mask,
    embedder: RegionEmbedder | None = None,
) -> float:
    """Cosine similarity of embeddings of the mask-region crops, in [-1, 1]."""
    check_same_shape(restored.pixels, gt.pixels, "restored and ground truth")
    check_same_shape(restored.pixels, mask.bits, "image and mask")
    y0, y1, x0, x1 = mask_bbox(mask)
    if embedder is None:
        embedder = _region_embedder()
    crop_r = torch.from_numpy(restored.pixels[y0:y1, x0:x1].transpose(2, 0, 1))[None]
    crop_g = torch.from_numpy(gt.pixels[y0:y1, x0:x1].transpose(2, 0, 1))[None]
    with torch.no_grad():
        er = embedder(crop_r)
        eg = embedder(crop_g)
    return float((er * eg).sum())
