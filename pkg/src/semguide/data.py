"""Image loading, mask protocols, and masked-scene construction.

Masks use 1 = missing/hole. Two protocols are provided: a fixed center box
covering a target area fraction, and an irregular brush-plus-rectangles
generator whose realized coverage lands in a configured band.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .validation import (
    as_image_array,
    as_mask_array,
    check_fraction,
    check_resolution,
    check_same_shape,
)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class ImageRecord:
    """An RGB image with values in [0, 1]."""

    id: str
    pixels: np.ndarray  # (H, W, 3) float32
    source_path: str = ""

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Mask:
    """A binary hole map; 1 marks a missing pixel."""

    bits: np.ndarray  # (H, W) uint8
    kind: str  # "center_box" | "random_brush"
    area_fraction: float
    seed: int = 0

    @property
    def coverage(self) -> float:
        return float(self.bits.mean())


@dataclass
class MaskedScene:
    """An image paired with a hole mask.

    ``masked_pixels`` is the 4-channel network input: RGB with the hole
    zeroed, plus the mask as a fourth channel.
    """

    image: ImageRecord
    mask: Mask
    masked_pixels: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        check_same_shape(self.image.pixels, self.mask.bits, "image and mask")
        hole = self.mask.bits[..., None].astype(np.float32)
        rgb = self.image.pixels * (1.0 - hole)
        self.masked_pixels = np.concatenate([rgb, hole], axis=2)

    @property
    def visible_rgb(self) -> np.ndarray:
        """RGB with the hole zeroed, (H, W, 3)."""
        return self.masked_pixels[..., :3]

    @property
    def resolution(self) -> int:
        return self.image.resolution


def load_image(path: str | Path, resolution: int, record_id: str | None = None) -> ImageRecord:
    path = Path(path)
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        pixels = np.asarray(img, dtype=np.float32) / 255.0
    return ImageRecord(id=record_id or path.stem, pixels=pixels, source_path=str(path))


def load_image_dir(path: str | Path, resolution: int = 256) -> list[ImageRecord]:
    """Load every decodable image under ``path``, sorted by file path.

    Unreadable files are skipped with a warning; an empty result is an error.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    resolution = check_resolution(resolution)

    records = []
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    for file in files:
        try:
            records.append(load_image(file, resolution, record_id=str(file.relative_to(root))))
        except Exception as exc:  # noqa: BLE001 - corrupt files must not abort the scan
            logger.warning("skipping unreadable image %s: %s", file, exc)
    if not records:
        raise ValueError(f"no decodable images found in {root}")
    return records


def make_center_box_mask(resolution: int, area_fraction: float) -> Mask:
    """Axis-aligned square hole at the image center.

    The side is round(resolution * sqrt(area_fraction)), the closest-area
    square for the requested fraction.
    """
    resolution = check_resolution(resolution)
    area_fraction = check_fraction(area_fraction)
    side = int(round(resolution * math.sqrt(area_fraction)))
    side = min(max(side, 1), resolution)
    start = (resolution - side) // 2
    bits = np.zeros((resolution, resolution), dtype=np.uint8)
    bits[start : start + side, start : start + side] = 1
    return Mask(bits=bits, kind="center_box", area_fraction=area_fraction)


def _draw_stroke(bits: np.ndarray, rng: np.random.Generator, resolution: int) -> None:
    """Stamp one random-walk brush stroke of varying thickness."""
    scale = resolution / 256.0
    thickness = max(1, int(rng.integers(12, 41) * scale))
    n_segments = int(rng.integers(4, 9))
    x = float(rng.uniform(0, resolution))
    y = float(rng.uniform(0, resolution))
    angle = float(rng.uniform(0, 2 * math.pi))
    for _ in range(n_segments):
        angle += float(rng.uniform(-math.pi / 2, math.pi / 2))
        length = float(rng.uniform(resolution / 12, resolution / 6))
        nx = float(np.clip(x + length * math.cos(angle), 0, resolution - 1))
        ny = float(np.clip(y + length * math.sin(angle), 0, resolution - 1))
        cv2.line(bits, (int(x), int(y)), (int(nx), int(ny)), 1, thickness)
        cv2.circle(bits, (int(nx), int(ny)), thickness // 2, 1, -1)
        x, y = nx, ny


def _draw_rectangle(bits: np.ndarray, rng: np.random.Generator, resolution: int) -> None:
    w = int(rng.integers(resolution // 8, resolution // 2))
    h = int(rng.integers(resolution // 8, resolution // 2))
    x0 = int(rng.integers(0, max(1, resolution - w)))
    y0 = int(rng.integers(0, max(1, resolution - h)))
    bits[y0 : y0 + h, x0 : x0 + w] = 1


def make_random_brush_mask(
    resolution: int,
    min_frac: float,
    max_frac: float,
    seed: int,
    max_attempts: int = 20,
) -> Mask:
    """Irregular hole from random brush strokes and rectangles.

    Strokes are stamped until coverage reaches ``min_frac``; an attempt that
    overshoots ``max_frac`` is discarded. Deterministic for a given seed.
    """
    resolution = check_resolution(resolution)
    min_frac = check_fraction(min_frac, "min_frac")
    max_frac = check_fraction(max_frac, "max_frac")
    if min_frac >= max_frac:
        raise ValueError(f"min_frac must be < max_frac, got [{min_frac}, {max_frac}]")

    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        bits = np.zeros((resolution, resolution), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            _draw_rectangle(bits, rng, resolution)
        for _ in range(int(rng.integers(4, 9))):
            if bits.mean() >= min_frac:
                break
            _draw_stroke(bits, rng, resolution)
        extra = 0
        while bits.mean() < min_frac and extra < 64:
            _draw_stroke(bits, rng, resolution)
            extra += 1
        coverage = float(bits.mean())
        if min_frac <= coverage <= max_frac:
            return Mask(bits=bits, kind="random_brush", area_fraction=coverage, seed=seed)
    raise RuntimeError(
        f"could not reach coverage in [{min_frac}, {max_frac}] "
        f"after {max_attempts} attempts (seed={seed})"
    )


def apply_mask(image: ImageRecord, mask: Mask) -> MaskedScene:
    """Zero the hole region and append the mask channel."""
    check_same_shape(image.pixels, mask.bits, "image and mask")
    return MaskedScene(image=image, mask=mask)


# ---------------------------------------------------------------------------
# Persistence: one directory per scene, image + 1-bit mask + sidecar metadata.
# ---------------------------------------------------------------------------


def save_image_record(record: ImageRecord, path: str | Path) -> None:
    arr = (np.clip(record.pixels, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: Mask, path: str | Path) -> None:
    Image.fromarray((mask.bits * 255).astype(np.uint8), mode="L").convert("1").save(path)


def load_mask(path: str | Path, kind: str = "", area_fraction: float = 0.0, seed: int = 0) -> Mask:
    with Image.open(path) as img:
        bits = (np.asarray(img.convert("L")) > 127).astype(np.uint8)
    return Mask(bits=as_mask_array(bits), kind=kind, area_fraction=area_fraction, seed=seed)


def save_scene(scene: MaskedScene, scene_dir: str | Path) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_image_record(scene.image, scene_dir / "image.png")
    save_mask(scene.mask, scene_dir / "mask.png")
    meta = {
        "id": scene.image.id,
        "kind": scene.mask.kind,
        "area_fraction": scene.mask.area_fraction,
        "seed": scene.mask.seed,
        "resolution": scene.resolution,
    }
    (scene_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def load_scene(scene_dir: str | Path) -> MaskedScene:
    scene_dir = Path(scene_dir)
    meta = json.loads((scene_dir / "meta.json").read_text())
    image = load_image(scene_dir / "image.png", meta["resolution"], record_id=meta["id"])
    mask = load_mask(
        scene_dir / "mask.png",
        kind=meta["kind"],
        area_fraction=meta["area_fraction"],
        seed=meta["seed"],
    )
    return apply_mask(image, mask)


def load_scene_dir(root: str | Path) -> list[MaskedScene]:
    root = Path(root)
    scene_dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not scene_dirs:
        raise ValueError(f"no scenes found in {root}")
    return [load_scene(d) for d in scene_dirs]


def image_from_array(pixels, record_id: str = "image") -> ImageRecord:
    """Build a record from an in-memory array, validating range and shape."""
    return ImageRecord(id=record_id, pixels=as_image_array(pixels))
