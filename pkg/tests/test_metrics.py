import logging

import numpy as np
import pytest

import semguide as sg
from semguide.features import PooledEmbedder
from semguide.metrics import mask_bbox

from conftest import random_image


@pytest.fixture(scope="module")
def small_embedder():
    return PooledEmbedder(dim=48, seed=5)


def image_set(n, seed, resolution=32):
    return [random_image(seed * 100 + k, resolution) for k in range(n)]


def noisy_copy(images, sigma, seed=0):
    rng = np.random.default_rng(seed)
    return [
        sg.ImageRecord(
            id=f"{im.id}_noisy",
            pixels=np.clip(
                im.pixels + rng.normal(0, sigma, im.pixels.shape).astype(np.float32), 0, 1
            ),
        )
        for im in images
    ]


class TestFid:
    def test_identical_sets_near_zero(self, small_embedder):
        images = image_set(8, 1)
        assert sg.fid(images, images, embedder=small_embedder) <= 1e-4

    def test_noise_increases_distance(self, small_embedder):
        images = image_set(8, 2)
        noisy = noisy_copy(images, sigma=0.3)
        same = sg.fid(images, images, embedder=small_embedder)
        different = sg.fid(noisy, images, embedder=small_embedder)
        assert different > same

    def test_small_sets_warn_but_finite(self, small_embedder, caplog):
        with caplog.at_level(logging.WARNING):
            value = sg.fid(image_set(10, 3), image_set(10, 4), embedder=small_embedder)
        assert np.isfinite(value) and value > 0
        assert any("small-sample" in r.message for r in caplog.records)

    def test_too_few_images_error(self, small_embedder):
        with pytest.raises(ValueError, match=">= 2"):
            sg.fid(image_set(1, 5), image_set(4, 6), embedder=small_embedder)

    def test_deterministic(self, small_embedder):
        a, b = image_set(6, 7), image_set(6, 8)
        assert sg.fid(a, b, embedder=small_embedder) == sg.fid(a, b, embedder=small_embedder)


class TestLpipsMetric:
    def test_identity_zero(self):
        x = random_image(0, 32)
        assert sg.lpips_metric(x, x) == 0.0

    def test_symmetric(self):
        a, b = random_image(1, 32), random_image(2, 32)
        assert abs(sg.lpips_metric(a, b) - sg.lpips_metric(b, a)) <= 1e-6

    def test_monotone_in_noise(self):
        a = random_image(3, 32)
        light = noisy_copy([a], sigma=0.05, seed=1)[0]
        heavy = noisy_copy([a], sigma=0.20, seed=1)[0]
        assert sg.lpips_metric(a, heavy) > sg.lpips_metric(a, light)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sg.lpips_metric(random_image(4, 32), random_image(5, 64))


class TestClipAtMask:
    def test_identity_is_one(self):
        gt = random_image(0, 64)
        mask = sg.make_center_box_mask(64, 0.4)
        assert sg.clip_at_mask(gt, gt, mask) == pytest.approx(1.0, abs=1e-4)

    def test_gray_fill_scores_lower(self):
        gt = random_image(1, 64)
        mask = sg.make_center_box_mask(64, 0.4)
        gray = gt.pixels.copy()
        gray[mask.bits == 1] = 0.5
        restored = sg.ImageRecord(id="gray", pixels=gray)
        assert sg.clip_at_mask(restored, gt, mask) < sg.clip_at_mask(gt, gt, mask)

    def test_empty_mask_error(self):
        gt = random_image(2, 32)
        empty = sg.Mask(bits=np.zeros((32, 32), np.uint8), kind="center_box", area_fraction=0.0)
        with pytest.raises(ValueError, match="empty"):
            sg.clip_at_mask(gt, gt, empty)

    def test_degenerate_bbox_padded(self, caplog):
        bits = np.zeros((64, 64), np.uint8)
        bits[30:32, 30:32] = 1  # 2x2 hole
        mask = sg.Mask(bits=bits, kind="center_box", area_fraction=bits.mean())
        with caplog.at_level(logging.INFO):
            y0, y1, x0, x1 = mask_bbox(mask)
        assert y1 - y0 >= 8 and x1 - x0 >= 8
        assert any("padding" in r.message for r in caplog.records)
        gt = random_image(3, 64)
        assert sg.clip_at_mask(gt, gt, mask) == pytest.approx(1.0, abs=1e-4)

    def test_value_in_range(self):
        gt = random_image(4, 64)
        other = random_image(5, 64)
        mask = sg.make_center_box_mask(64, 0.5)
        value = sg.clip_at_mask(other, gt, mask)
        assert -1.0 <= value <= 1.0
