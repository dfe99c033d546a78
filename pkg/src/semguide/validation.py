"""Input validation helpers shared across the package.

Array conventions: images are (H, W, 3) float32 in [0, 1], masks are
(H, W) uint8 with 1 marking a missing pixel.
"""

from __future__ import annotations

import numpy as np


def as_image_array(pixels, name: str = "pixels") -> np.ndarray:
    """Coerce to a (H, W, 3) float32 array in [0, 1], or raise ValueError."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def as_mask_array(bits, name: str = "mask") -> np.ndarray:
    """Coerce to a (H, W) uint8 binary array, or raise ValueError."""
    arr = np.asarray(bits)
    if arr.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {arr.shape}")
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"{name} must be binary, found values {uniq[:8]}")
    return arr.astype(np.uint8)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"{what} have mismatched shapes: {a.shape} vs {b.shape}")


def check_fraction(value: float, name: str = "area_fraction") -> float:
    value = float(value)
    if not (0.0 < value < 1.0):
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_unit_interval(value: float, name: str) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_resolution(resolution: int) -> int:
    resolution = int(resolution)
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    return resolution
