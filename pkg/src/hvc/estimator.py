"""Scikit-learn style wrappers around the trainer and the label propagator."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import CropConfig
from .network import NetConfig
from .propagation import PropagationConfig, run_video
from .trainer import HVCTrainer, TrainConfig
from .validation import check_features, check_images, check_label_map


class HVCEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised dense encoder trained with the hybrid static-dynamic loss.

    ``fit`` trains on unlabeled still images; ``transform`` returns the
    target network's unit-norm feature maps, shape (N, C, h, w).

    Examples
    --------
    >>> enc = HVCEncoder(epochs=1, max_steps=2).fit(images)   # doctest: +SKIP
    >>> enc.transform(images[:4]).shape                       # doctest: +SKIP
    (4, 256, 8, 8)
    """

    def __init__(self, view_size=64, backbone_channels=(32, 64, 64), hidden_channels=256,
                 out_channels=256, batch_size=16, epochs=20, r=0.1, alpha=1.0, lr=1e-3,
                 m0=0.99, momentum_schedule="cosine", seed=0, dtype="float32", max_steps=None):
        self.view_size = view_size
        self.backbone_channels = backbone_channels
        self.hidden_channels = hidden_channels
        self.out_channels = out_channels
        self.batch_size = batch_size
        self.epochs = epochs
        self.r = r
        self.alpha = alpha
        self.lr = lr
        self.m0 = m0
        self.momentum_schedule = momentum_schedule
        self.seed = seed
        self.dtype = dtype
        self.max_steps = max_steps

    def _configs(self):
        train = TrainConfig(batch_size=self.batch_size, epochs=self.epochs, r=self.r,
                            alpha=self.alpha, seed=self.seed, lr=self.lr, m0=self.m0,
                            momentum_schedule=self.momentum_schedule)
        net = NetConfig(backbone_channels=tuple(self.backbone_channels),
                        hidden_channels=self.hidden_channels, out_channels=self.out_channels)
        crop = CropConfig(view_size=self.view_size, min_side=min(32, self.view_size))
        return train, net, crop

    def fit(self, X, y=None, log_path=None):
        X = check_images(X, min_side=2)
        train, net, crop = self._configs()
        self.trainer_ = HVCTrainer(train, net, crop, dtype=np.dtype(self.dtype))
        records = self.trainer_.fit(X, log_path=log_path, max_steps=self.max_steps)
        self.loss_curve_ = np.array([r["loss"] for r in records])
        self.n_steps_ = self.trainer_.step
        self.n_features_out_ = self.out_channels
        return self

    @classmethod
    def from_trainer(cls, trainer: HVCTrainer):
        """Wrap an already trained (or checkpoint-loaded) trainer."""
        t, n, c = trainer.cfg, trainer.net_cfg, trainer.crop_cfg
        est = cls(view_size=c.view_size, backbone_channels=tuple(n.backbone_channels),
                  hidden_channels=n.hidden_channels, out_channels=n.out_channels,
                  batch_size=t.batch_size, epochs=t.epochs, r=t.r, alpha=t.alpha, lr=t.lr,
                  m0=t.m0, momentum_schedule=t.momentum_schedule, seed=t.seed,
                  dtype=trainer.dtype.name)
        est.trainer_ = trainer
        est.loss_curve_ = np.array([])
        est.n_steps_ = trainer.step
        est.n_features_out_ = n.out_channels
        return est

    def transform(self, X):
        check_is_fitted(self, "trainer_")
        X = check_images(X)
        return self.trainer_.target.transform(X)


class LabelPropagator(BaseEstimator):
    """Propagate a reference frame's label map through following frames.

    ``fit(reference_frame, reference_mask)`` stores the annotated anchor;
    ``predict(frames)`` returns one (H, W) label map per frame. Features
    come from ``encoder`` (anything with ``transform``) unless
    ``predict`` is given precomputed ``features`` for anchor + frames.
    """

    def __init__(self, encoder=None, n_context=5, top_k=10, temperature=0.07, radius=None):
        self.encoder = encoder
        self.n_context = n_context
        self.top_k = top_k
        self.temperature = temperature
        self.radius = radius

    def _config(self):
        return PropagationConfig(self.n_context, self.top_k, self.temperature, self.radius).validate()

    def fit(self, X, y):
        X = check_images(X)
        if X.shape[0] != 1:
            raise ValueError("fit expects exactly one reference frame")
        self.reference_frame_ = X[0]
        self.reference_mask_ = check_label_map(y, X.shape[1:3])
        self.classes_ = np.arange(int(self.reference_mask_.max()) + 1)
        self._config()
        return self

    def predict(self, X, features=None):
        check_is_fitted(self, "reference_mask_")
        X = check_images(X)
        if X.shape[1:3] != self.reference_frame_.shape[:2]:
            raise ValueError(f"frames {X.shape[1:3]} vs reference {self.reference_frame_.shape[:2]}")
        frames = np.concatenate([self.reference_frame_[None].astype(X.dtype), X])
        if features is not None:
            features = check_features(features)
            if len(features) != len(frames):
                raise ValueError(f"need {len(frames)} feature maps (anchor + frames), got {len(features)}")
        elif self.encoder is None:
            raise ValueError("no encoder set and no features given")
        hard, _ = run_video(self.encoder, frames, self.reference_mask_, self._config(), features=features)
        return hard[1:]
