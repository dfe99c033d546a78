"""Scikit-learn style front end: fit on masked scenes with ground truth,
transform scenes into guidance images."""

from __future__ import annotations

import tempfile

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .candidates import CandidateCompletion, CandidateSet
from .data import ImageRecord, MaskedScene
from .evaluation import build_candidate_sets
from .selection import GuidanceImage
from .training import TrainConfig, train


class GuidanceGenerator(BaseEstimator):
    """Trainable generator of semantic guidance images.

    Parameters follow the training/architecture configuration; ``fit`` takes
    masked scenes ``X`` and their ground-truth images ``y``, ``transform``
    maps scenes (with candidate sets) to guidance images. Candidates can be
    supplied explicitly or generated through ``backend``.
    """

    def __init__(
        self,
        resolution=64,
        patch_size=4,
        levels=3,
        channels=(16, 32, 64),
        heads=(2, 4, 8),
        window_size=4,
        depths=(1, 1, 1),
        p=3,
        n=4,
        threshold=0.5,
        lr=2e-4,
        batch_size=12,
        epochs=200,
        lambda_=0.8,
        tau_start=1.0,
        tau_end=0.1,
        seed=0,
        max_steps=None,
        backend=None,
        encoder_design="dual",
    ):
        self.resolution = resolution
        self.patch_size = patch_size
        self.levels = levels
        self.channels = channels
        self.heads = heads
        self.window_size = window_size
        self.depths = depths
        self.p = p
        self.n = n
        self.threshold = threshold
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.lambda_ = lambda_
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.seed = seed
        self.max_steps = max_steps
        self.backend = backend
        self.encoder_design = encoder_design

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lambda_=self.lambda_,
            tau_start=self.tau_start,
            tau_end=self.tau_end,
            p=self.p,
            n=self.n,
            seed=self.seed,
            resolution=self.resolution,
            threshold=self.threshold,
            patch_size=self.patch_size,
            levels=self.levels,
            channels=tuple(self.channels),
            heads=tuple(self.heads),
            window_size=self.window_size,
            depths=tuple(self.depths),
            encoder_design=self.encoder_design,
        )

    def _resolve_candidates(
        self, X: list[MaskedScene], candidates
    ) -> dict[str, list[CandidateCompletion]]:
        if candidates is not None:
            out = {}
            for scene, cands in zip(X, candidates):
                if isinstance(cands, CandidateSet):
                    out[scene.image.id] = cands.selected
                else:
                    out[scene.image.id] = list(cands)
            return out
        if self.backend is None:
            raise ValueError("no candidates given and no backend configured")
        sets = build_candidate_sets(X, self.backend, self.n, self.p, seed=self.seed)
        return {k: v.selected for k, v in sets.items()}

    @staticmethod
    def _validate(X, y=None) -> None:
        if not X:
            raise ValueError("X must contain at least one scene")
        for scene in X:
            if not isinstance(scene, MaskedScene):
                raise TypeError(f"X items must be MaskedScene, got {type(scene).__name__}")
        if y is not None:
            if len(y) != len(X):
                raise ValueError(f"X and y lengths differ: {len(X)} vs {len(y)}")
            for rec in y:
                if not isinstance(rec, ImageRecord):
                    raise TypeError(f"y items must be ImageRecord, got {type(rec).__name__}")

    def fit(self, X: list[MaskedScene], y: list[ImageRecord], candidates=None):
        """Train the fusion and scoring networks on scenes X with targets y."""
        self._validate(X, y)
        store = self._resolve_candidates(X, candidates)
        config = self._train_config()
        with tempfile.TemporaryDirectory(prefix="semguide_fit_") as tmp:
            result = train(config, X, y, store, tmp, max_steps=self.max_steps)
        self.model_ = result.model
        self.history_ = result.history
        return self

    def transform(self, X: list[MaskedScene], candidates=None) -> list[GuidanceImage]:
        """Produce hard-mode guidance images for scenes X."""
        if not hasattr(self, "model_"):
            raise NotFittedError("this GuidanceGenerator instance is not fitted yet")
        self._validate(X)
        store = self._resolve_candidates(X, candidates)
        return [
            self.model_.infer(scene, store[scene.image.id], threshold=self.threshold)
            for scene in X
        ]

    def fit_transform(self, X, y, candidates=None) -> list[GuidanceImage]:
        return self.fit(X, y, candidates=candidates).transform(X, candidates=candidates)
