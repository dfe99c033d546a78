import numpy as np
import pytest
import torch
from scipy import ndimage

import semguide as sg
from semguide.candidates import CandidateCompletion
from semguide.training import TrainConfig, train


def random_image(seed: int, resolution: int = 32, record_id: str | None = None) -> sg.ImageRecord:
    rng = np.random.default_rng(seed)
    pixels = rng.random((resolution, resolution, 3), dtype=np.float32)
    return sg.ImageRecord(id=record_id or f"img{seed}", pixels=pixels)


def stripe_candidates(gt, scene, n, noise_level, seed):
    """Complementary candidates: candidate i is clean inside vertical band i
    and corrupted elsewhere, so per-pixel selection can beat any single one."""
    rng = np.random.default_rng(seed)
    H, W = gt.pixels.shape[:2]
    out = []
    for i in range(n):
        radius = int(rng.integers(2, 5))
        validity = ndimage.binary_dilation(scene.mask.bits.astype(bool), iterations=radius)
        noise = rng.random((H, W, 3), dtype=np.float32)
        values = (1.0 - noise_level) * gt.pixels + noise_level * noise
        band = slice(i * W // n, (i + 1) * W // n)
        values[:, band] = gt.pixels[:, band]
        out.append(
            CandidateCompletion(
                values=values * validity[..., None],
                validity=validity.astype(np.uint8),
                backend_id="stripe",
            )
        )
    return out


def make_toy_set(n_images: int, resolution: int = 32, corruption=(0.0, 0.6, 1.0), seed: int = 0):
    """Scenes + ground truths + oracle candidate store."""
    scenes, gts, store = [], [], {}
    for i in range(n_images):
        gt = random_image(seed * 1000 + i, resolution)
        mask = sg.make_center_box_mask(resolution, 0.5)
        scene = sg.apply_mask(gt, mask)
        store[gt.id] = sg.synth_candidates(gt, scene, len(corruption), list(corruption), seed=i)
        scenes.append(scene)
        gts.append(gt)
    return scenes, gts, store


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        lr=1e-3,
        batch_size=8,
        epochs=100,
        p=3,
        n=3,
        seed=0,
        resolution=32,
        patch_size=4,
        levels=2,
        channels=(16, 32),
        heads=(2, 4),
        window_size=4,
        depths=(1, 1),
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_model_config(**overrides):
    from semguide.model import ModelConfig

    base = dict(
        resolution=32,
        patch_size=4,
        levels=2,
        channels=(16, 32),
        heads=(2, 4),
        window_size=4,
        depths=(1, 1),
        candidate_count=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """A short shared training run on the scalar-corruption oracle set."""
    torch.manual_seed(0)
    scenes, gts, store = make_toy_set(16, resolution=32, corruption=(0.0, 0.6, 1.0))
    config = tiny_train_config()
    out = tmp_path_factory.mktemp("toy_run")
    result = train(config, scenes, gts, store, out, max_steps=120)
    return {
        "scenes": scenes,
        "gts": gts,
        "store": store,
        "config": config,
        "result": result,
        "out": out,
    }
